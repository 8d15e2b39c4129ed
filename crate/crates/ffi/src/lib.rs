//! C ABI over `magnet-core`.
//!
//! Cohorts and trained models cross the boundary as opaque handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns a [`MagnetStatus`]; on failure a message is kept per thread and can
//! be read with [`magnet_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use magnet_core::connectome::{load_cohort, write_cohort, SubjectRecord};
use magnet_core::hybrid_graph::count_detours;
use magnet_core::pipeline::{build_graphs, predict, train_full, Checkpoint, TrainConfig};
use magnet_core::synth::{generate_cohort, SynthConfig};
use magnet_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferSize = 3,
    Validation = 4,
    Config = 5,
    Numeric = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

/// Subject records loaded from disk or generated.
pub struct MagnetCohort {
    records: Vec<SubjectRecord>,
}

/// A trained model checkpoint.
pub struct MagnetModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: MagnetStatus,
    message: String,
}

impl Failure {
    fn new(status: MagnetStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Validation(_) => MagnetStatus::Validation,
            Error::Config(_) => MagnetStatus::Config,
            Error::Numeric(_) => MagnetStatus::Numeric,
            Error::Io { .. } => MagnetStatus::Io,
            Error::Parse { .. } => MagnetStatus::Parse,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MagnetStatus {
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure::new(MagnetStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            MagnetStatus::Ok
        }
        Err(f) => {
            set_last_error(&f.message);
            f.status
        }
    }
}

unsafe fn non_null<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| Failure::new(MagnetStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slot<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| Failure::new(MagnetStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(Failure::new(MagnetStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::new(MagnetStatus::InvalidUtf8, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn magnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn magnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic cohort with default coupling and noise.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn magnet_cohort_generate(
    seed: u64,
    subjects: usize,
    nodes: usize,
    out: *mut *mut MagnetCohort,
) -> MagnetStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        let cohort = generate_cohort(&SynthConfig {
            seed,
            subjects,
            nodes,
            ..Default::default()
        })?;
        *out = Box::into_raw(Box::new(MagnetCohort {
            records: cohort.records,
        }));
        Ok(())
    })
}

/// Loads a cohort directory written by `magnet gen-data` or
/// [`magnet_cohort_write`].
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magnet_cohort_load(dir: *const c_char, out: *mut *mut MagnetCohort) -> MagnetStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let out = out_slot(out, "out")?;
        let records = load_cohort(&dir)?;
        *out = Box::into_raw(Box::new(MagnetCohort { records }));
        Ok(())
    })
}

/// Writes the cohort as CSV files plus a manifest.
///
/// # Safety
/// `cohort` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn magnet_cohort_write(cohort: *const MagnetCohort, dir: *const c_char) -> MagnetStatus {
    guard(|| {
        let cohort = non_null(cohort, "cohort")?;
        let dir = path_arg(dir, "dir")?;
        write_cohort(&dir, &cohort.records)?;
        Ok(())
    })
}

/// Number of subjects, or 0 for a null handle.
///
/// # Safety
/// `cohort` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn magnet_cohort_len(cohort: *const MagnetCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.records.len())
}

/// # Safety
/// `cohort` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn magnet_cohort_free(cohort: *mut MagnetCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Fits a model on the whole cohort. `config_json` is a training
/// configuration in the CLI's JSON format; NULL selects the defaults.
///
/// # Safety
/// `cohort` must be a live handle, `config_json` null or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_train(
    cohort: *const MagnetCohort,
    config_json: *const c_char,
    out: *mut *mut MagnetModel,
) -> MagnetStatus {
    guard(|| {
        let cohort = non_null(cohort, "cohort")?;
        let out = out_slot(out, "out")?;
        let config: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Failure::new(MagnetStatus::InvalidUtf8, "config is not UTF-8"))?;
            serde_json::from_str(text).map_err(|e| Failure::new(MagnetStatus::Parse, format!("config: {e}")))?
        };
        config.validate()?;
        let graphs = build_graphs(&cohort.records, &config.graph, config.ablation.graph())?;
        let checkpoint = train_full(&cohort.records, &graphs, &config)?;
        *out = Box::into_raw(Box::new(MagnetModel { checkpoint }));
        Ok(())
    })
}

/// Loads a checkpoint written by `magnet train` or [`magnet_model_save`].
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_load(path: *const c_char, out: *mut *mut MagnetModel) -> MagnetStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_slot(out, "out")?;
        let checkpoint = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(MagnetModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_save(model: *const MagnetModel, path: *const c_char) -> MagnetStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let path = path_arg(path, "path")?;
        model.checkpoint.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_free(model: *mut MagnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts one score per subject into `out`, which must hold exactly
/// `magnet_cohort_len(cohort)` values. Subjects whose graph is degenerate
/// get NaN.
///
/// # Safety
/// `model` and `cohort` must be live handles; `out` must point to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_predict(
    model: *const MagnetModel,
    cohort: *const MagnetCohort,
    out: *mut f64,
    len: usize,
) -> MagnetStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let cohort = non_null(cohort, "cohort")?;
        if out.is_null() {
            return Err(Failure::new(MagnetStatus::NullPointer, "out is null"));
        }
        let n = cohort.records.len();
        if len != n {
            return Err(Failure::new(
                MagnetStatus::BufferSize,
                format!("buffer holds {len} values, cohort has {n} subjects"),
            ));
        }
        let ckpt = &model.checkpoint;
        let params = ckpt.param_store()?;
        let graphs = build_graphs(&cohort.records, &ckpt.config.graph, ckpt.config.ablation.graph())?;
        let all: Vec<usize> = (0..n).collect();
        let preds = predict(&params, &ckpt.config.model, &ckpt.scaler, &graphs, &all)?;
        let values = std::slice::from_raw_parts_mut(out, len);
        values.fill(f64::NAN);
        for (i, p) in preds {
            values[i] = p;
        }
        Ok(())
    })
}

/// Counts simple paths of exactly `radius` edges between `from` and `to` in
/// the graph given by the row-major `n`×`n` adjacency (nonzero = edge).
///
/// # Safety
/// `adjacency` must point to `n * n` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magnet_count_detours(
    adjacency: *const u8,
    n: usize,
    from: usize,
    to: usize,
    radius: usize,
    out: *mut u64,
) -> MagnetStatus {
    guard(|| {
        if adjacency.is_null() {
            return Err(Failure::new(MagnetStatus::NullPointer, "adjacency is null"));
        }
        let out = out_slot(out, "out")?;
        let cells = n
            .checked_mul(n)
            .ok_or_else(|| Failure::new(MagnetStatus::Validation, "adjacency size overflows"))?;
        let flat = std::slice::from_raw_parts(adjacency, cells);
        let rows: Vec<Vec<bool>> = flat.chunks(n.max(1)).map(|r| r.iter().map(|&b| b != 0).collect()).collect();
        *out = count_detours(&rows, from, to, radius)?;
        Ok(())
    })
}
