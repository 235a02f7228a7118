//! C ABI over `amrlab`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` and
//! released by `*_free`. Every call returns an [`AmrlabStatus`]; on failure
//! [`amrlab_last_error`] describes what went wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use amrlab::attribution::{attribute, AttributedLogit};
use amrlab::baselines::ogm_coefficients;
use amrlab::cli::{self, Cli, Command};
use amrlab::data::{load_feature_file, Dataset};
use amrlab::harness::mean_average_precision;
use amrlab::model::MultimodalModel;
use amrlab::tensor::Tensor;
use amrlab::Error;

/// Result of every exported call. Values 2..=4 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmrlabStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 string.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Loaded AMRDATA dataset.
pub struct AmrlabDataset(Dataset);

/// Loaded model checkpoint.
pub struct AmrlabModel(MultimodalModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> AmrlabStatus {
    match err.exit_code() {
        2 => AmrlabStatus::Config,
        3 => AmrlabStatus::Data,
        _ => AmrlabStatus::Numeric,
    }
}

fn invalid(msg: &str) -> AmrlabStatus {
    set_error(msg.to_string());
    AmrlabStatus::InvalidArgument
}

fn guard(f: impl FnOnce() -> Result<(), AmrlabStatus>) -> AmrlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmrlabStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside amrlab".into());
            AmrlabStatus::Panic
        }
    }
}

fn check<T>(r: amrlab::Result<T>) -> Result<T, AmrlabStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, AmrlabStatus> {
    if p.is_null() {
        return Err(invalid("null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize) -> Result<&'a [T], AmrlabStatus> {
    if p.is_null() {
        return Err(invalid("null input buffer"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], AmrlabStatus> {
    if p.is_null() {
        return Err(invalid("null output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amrlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads an AMRDATA file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn amrlab_dataset_load(
    path: *const c_char,
    out: *mut *mut AmrlabDataset,
) -> AmrlabStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(invalid("null out handle"));
        }
        let ds = check(load_feature_file(&path))?;
        *out = Box::into_raw(Box::new(AmrlabDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`amrlab_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amrlab_dataset_free(ds: *mut AmrlabDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes sample count, modality count and class count.
///
/// # Safety
/// `ds` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn amrlab_dataset_shape(
    ds: *const AmrlabDataset,
    samples: *mut usize,
    modalities: *mut usize,
    classes: *mut usize,
) -> AmrlabStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| invalid("null dataset"))?;
        if samples.is_null() || modalities.is_null() || classes.is_null() {
            return Err(invalid("null out pointer"));
        }
        *samples = ds.0.len();
        *modalities = ds.0.num_modalities();
        *classes = ds.0.num_classes();
        Ok(())
    })
}

/// Feature width of modality `m`.
///
/// # Safety
/// `ds` must be a live handle; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amrlab_dataset_modality_dim(
    ds: *const AmrlabDataset,
    m: usize,
    dim: *mut usize,
) -> AmrlabStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| invalid("null dataset"))?;
        let dims = ds.0.modality_dims();
        if m >= dims.len() {
            return Err(invalid("modality index out of range"));
        }
        out_arg(dim, 1)?[0] = dims[m];
        Ok(())
    })
}

/// Loads a model checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn amrlab_model_load(
    path: *const c_char,
    out: *mut *mut AmrlabModel,
) -> AmrlabStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(invalid("null out handle"));
        }
        let model = check(MultimodalModel::load(&path))?;
        *out = Box::into_raw(Box::new(AmrlabModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`amrlab_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amrlab_model_free(model: *mut AmrlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of modalities the model expects.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amrlab_model_num_modalities(
    model: *const AmrlabModel,
    out: *mut usize,
) -> AmrlabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("null model"))?;
        out_arg(out, 1)?[0] = model.0.num_modalities();
        Ok(())
    })
}

/// Batch-mean attribution of `model` on all of `ds`, written to `out[0..len]`
/// where `len` must equal the number of modalities.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn amrlab_attribution(
    model: *const AmrlabModel,
    ds: *const AmrlabDataset,
    out: *mut f64,
    len: usize,
) -> AmrlabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("null model"))?;
        let ds = ds.as_ref().ok_or_else(|| invalid("null dataset"))?;
        if len != model.0.num_modalities() {
            return Err(invalid("out length must equal the number of modalities"));
        }
        let out = out_arg(out, len)?;
        let rep = check(attribute(
            &model.0,
            ds.0.features(),
            AttributedLogit::Predicted,
            None,
        ))?;
        out.copy_from_slice(&rep.batch_mean);
        Ok(())
    })
}

/// L1 distance between normalized `a` and normalized `ratios`.
///
/// # Safety
/// `a` and `ratios` must hold `m` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amrlab_amr_loss(
    a: *const f64,
    ratios: *const f64,
    m: usize,
    out: *mut f64,
) -> AmrlabStatus {
    guard(|| {
        let a = slice_arg(a, m)?;
        let r = slice_arg(ratios, m)?;
        out_arg(out, 1)?[0] = check(amrlab::amr::amr_loss_value(a, r))?;
        Ok(())
    })
}

/// OGM update coefficients for attribution `a` of length `m`.
///
/// # Safety
/// `a` and `out` must hold `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn amrlab_ogm_coefficients(
    a: *const f64,
    m: usize,
    alpha: f64,
    out: *mut f64,
) -> AmrlabStatus {
    guard(|| {
        let a = slice_arg(a, m)?;
        let out = out_arg(out, m)?;
        out.copy_from_slice(&ogm_coefficients(a, alpha));
        Ok(())
    })
}

/// mAP of row-major `scores` (`n × c`) against `labels`.
///
/// # Safety
/// `scores` must hold `n * c` doubles, `labels` `n` entries, `out` one double.
#[no_mangle]
pub unsafe extern "C" fn amrlab_mean_average_precision(
    scores: *const f64,
    n: usize,
    c: usize,
    labels: *const u32,
    out: *mut f64,
) -> AmrlabStatus {
    guard(|| {
        let total = n.checked_mul(c).ok_or_else(|| invalid("n * c overflows"))?;
        let s = slice_arg(scores, total)?;
        let l: Vec<usize> = slice_arg(labels, n)?.iter().map(|&v| v as usize).collect();
        let t = check(Tensor::new(vec![n, c], s.to_vec()))?;
        out_arg(out, 1)?[0] = check(mean_average_precision(&t, &l))?;
        Ok(())
    })
}

/// Trains one model from a TOML config, as `amrlab train` does. `out_dir`
/// may be null to use the directory named in the config.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` null or one.
#[no_mangle]
pub unsafe extern "C" fn amrlab_train(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> AmrlabStatus {
    guard(|| {
        let config = path_arg(config_path)?;
        let out = if out_dir.is_null() {
            None
        } else {
            Some(path_arg(out_dir)?)
        };
        let cli = Cli {
            config: Some(config),
            out,
            seed: None,
            jobs: None,
            dry_run: false,
            command: Command::Train,
        };
        check(cli::run(&cli))?;
        Ok(())
    })
}
