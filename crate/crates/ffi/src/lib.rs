//! C ABI over `stcf-core`.
//!
//! Datasets are opaque handles owned by the caller and released with
//! [`stcf_dataset_free`]. Every fallible call returns an [`StcfStatus`]; the
//! message of the most recent failure on the calling thread is available
//! through [`stcf_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stcf_core::estimator::{counterfactual_rates, estimate, FittedModels};
use stcf_core::harness::{policy_fields, ExperimentConfig};
use stcf_core::intensity::Backend;
use stcf_core::point_process::{poisson_log_pmf, Region, SubRegion};
use stcf_core::synthetic::{default_roads, ground_truth, simulate_series, Dataset, InterventionSpec, KernelMode};
use stcf_core::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StcfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Shape = 4,
    NonFinite = 5,
    State = 6,
    Config = 7,
    Training = 8,
    Metric = 9,
    Contract = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
    Parse = 14,
}

/// Opaque dataset handle.
pub struct StcfDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> StcfStatus {
    match e {
        Error::Alignment(_) | Error::Shape(_) => StcfStatus::Shape,
        Error::Domain(_) => StcfStatus::Domain,
        Error::NonFinite(_) => StcfStatus::NonFinite,
        Error::State(_) => StcfStatus::State,
        Error::Config(_) => StcfStatus::Config,
        Error::Training(_) => StcfStatus::Training,
        Error::Metric(_) => StcfStatus::Metric,
        Error::Contract(_) => StcfStatus::Contract,
        Error::Parse { .. } => StcfStatus::Parse,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => StcfStatus::Io,
    }
}

struct Fail(StcfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StcfStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            StcfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(StcfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn dataset<'a>(h: *const StcfDataset) -> Result<&'a Dataset, Fail> {
    h.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset handle"))
}

unsafe fn config(toml: *const c_char) -> Result<ExperimentConfig, Fail> {
    if toml.is_null() {
        return Ok(ExperimentConfig::benchmark());
    }
    let s = CStr::from_ptr(toml)
        .to_str()
        .map_err(|_| Fail(StcfStatus::InvalidArgument, "config is not UTF-8".into()))?;
    Ok(ExperimentConfig::from_toml_str(s)?)
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stcf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `capacity`). Returns the full message length excluding NUL.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn stcf_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Simulates a synthetic series of `length` steps on a `resolution`² unit
/// square. `gaussian` selects the gaussian proximity kernel when nonzero.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn stcf_simulate(
    length: usize,
    resolution: usize,
    seed: u64,
    gaussian: i32,
    out: *mut *mut StcfDataset,
) -> StcfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        if resolution < 2 {
            return Err(Fail(StcfStatus::InvalidArgument, "resolution must be at least 2".into()));
        }
        let mode = if gaussian != 0 { KernelMode::Gaussian } else { KernelMode::Exponential };
        let params = ExperimentConfig::default().generator.with_kernel_mode(mode);
        let d = simulate_series(&Region::unit_square(resolution), &default_roads(), &params, length, seed)?;
        out.write(Box::into_raw(Box::new(StcfDataset { inner: d })));
        Ok(())
    })
}

/// Loads a dataset directory written by the `stcf` CLI.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn stcf_dataset_load(dir: *const c_char, out: *mut *mut StcfDataset) -> StcfStatus {
    guard(|| {
        if dir.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let p = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Fail(StcfStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let d = Dataset::load(Path::new(p))?;
        out.write(Box::into_raw(Box::new(StcfDataset { inner: d })));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stcf_dataset_free(h: *mut StcfDataset) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Series length T.
///
/// # Safety
/// `h` must be a live handle and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn stcf_dataset_len(h: *const StcfDataset, out: *mut usize) -> StcfStatus {
    guard(|| write_out(out, dataset(h)?.len()))
}

/// Per-step treatment and outcome counts. Either output may be null.
///
/// # Safety
/// Non-null outputs must be valid for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn stcf_dataset_counts(
    h: *const StcfDataset,
    treatments: *mut u64,
    outcomes: *mut u64,
    capacity: usize,
) -> StcfStatus {
    guard(|| {
        let d = dataset(h)?;
        if capacity < d.len() {
            return Err(Fail(StcfStatus::BufferTooSmall, format!("need {} elements, got {capacity}", d.len())));
        }
        for t in 1..=d.len() {
            if !treatments.is_null() {
                *treatments.add(t - 1) = d.treatment(t).len() as u64;
            }
            if !outcomes.is_null() {
                *outcomes.add(t - 1) = d.outcome(t).len() as u64;
            }
        }
        Ok(())
    })
}

/// ln Pois(k; λ).
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn stcf_poisson_log_pmf(k: u64, lambda: f64, out: *mut f64) -> StcfStatus {
    guard(|| write_out(out, poisson_log_pmf(k, lambda)?))
}

/// Simulation ground truth over the whole region for duration `m` and
/// magnitude `c`.
///
/// # Safety
/// `h` must be a live handle; `value` and `standard_error` valid for writing
/// (`standard_error` may be null).
#[no_mangle]
pub unsafe extern "C" fn stcf_ground_truth(
    h: *const StcfDataset,
    m: usize,
    c: f64,
    replications: usize,
    seed: u64,
    value: *mut f64,
    standard_error: *mut f64,
) -> StcfStatus {
    guard(|| {
        let d = dataset(h)?;
        let spec = InterventionSpec::from_dataset(d, m, c)?;
        let g = ground_truth(d, &spec, &SubRegion::full(&d.region), replications, seed)?;
        if !standard_error.is_null() {
            standard_error.write(g.standard_error);
        }
        write_out(value, g.value)
    })
}

/// Fits the models and returns the IPW estimate over the configured ω.
/// `config_toml` may be null for the benchmark configuration; `kernel`
/// nonzero forces the kernel intensity backend.
///
/// # Safety
/// `h` must be a live handle, `config_toml` null or NUL-terminated, and `out`
/// valid for writing.
#[no_mangle]
pub unsafe extern "C" fn stcf_estimate(
    h: *const StcfDataset,
    m: usize,
    c: f64,
    config_toml: *const c_char,
    kernel: i32,
    seed: u64,
    out: *mut f64,
) -> StcfStatus {
    guard(|| {
        let d = dataset(h)?;
        let mut cfg = config(config_toml)?;
        if kernel != 0 {
            cfg.intensity.backend = Backend::Kernel;
        }
        let models = FittedModels::fit(d, &cfg.propensity, &cfg.intensity, seed)?;
        let integrals = models.integrals(&cfg.omega(&d.region)?)?;
        let policy = policy_fields(d, cfg.intensity.bandwidth_fraction)?;
        let spec = InterventionSpec::from_treatment_fields(m, c, &policy)?;
        let cps = counterfactual_rates(&spec, cfg.estimator.counterfactual_samples, seed)?;
        let est = estimate(d, &spec, &integrals, &models.lambda1, &cps, &cfg.estimator, seed)?;
        write_out(out, est.value)
    })
}
