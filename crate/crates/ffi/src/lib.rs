//! C interface to the completion model.
//!
//! Every function returns a [`VfStatus`]. On failure a message is kept per
//! thread and can be read with [`vf_last_error_message`]. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_read` functions and
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use viewfree::checkpoint::Checkpoint;
use viewfree::config::TrainConfig;
use viewfree::data::io::{read_cloud, write_pcf};
use viewfree::geometry::{PointCloud, Provenance};
use viewfree::loss::chamfer;
use viewfree::metrics::f_score;
use viewfree::model::Model;

/// Result codes. The nonzero library codes match the command line exit
/// codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    /// Invalid configuration or argument.
    Config = 2,
    /// Unreadable, missing or malformed data.
    Data = 3,
    /// Non-finite numbers.
    Divergence = 4,
    NullPointer = 10,
    InvalidUtf8 = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// A trained or freshly initialized model.
pub struct VfModel(Model);

/// A point cloud.
pub struct VfCloud(PointCloud);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

fn fail(status: VfStatus, msg: impl Into<String>) -> VfStatus {
    set_error(msg);
    status
}

fn from_error(e: viewfree::Error) -> VfStatus {
    let status = match e.exit_code() {
        3 => VfStatus::Data,
        4 => VfStatus::Divergence,
        _ => VfStatus::Config,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> VfStatus) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(VfStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, VfStatus> {
    if p.is_null() {
        return Err(fail(VfStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(VfStatus::InvalidUtf8, "path is not UTF-8"))
}

/// Message of the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn vf_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Build a cloud from `n` interleaved `x y z` triples.
///
/// # Safety
/// `xyz` must point to `3 * n` readable doubles and `out` must be valid
/// for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_new(xyz: *const f64, n: usize, out: *mut *mut VfCloud) -> VfStatus {
    guard(|| {
        if xyz.is_null() || out.is_null() {
            return fail(VfStatus::NullPointer, "null argument to vf_cloud_new");
        }
        let flat = std::slice::from_raw_parts(xyz, 3 * n);
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        match PointCloud::new(points, Provenance::Partial) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(VfCloud(c)));
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Read a PCF1 or ASCII `x y z` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_read(path: *const c_char, out: *mut *mut VfCloud) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return fail(VfStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_cloud(&path, Provenance::Partial) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(VfCloud(c)));
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Write a cloud as PCF1.
///
/// # Safety
/// `cloud` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_write(cloud: *const VfCloud, path: *const c_char) -> VfStatus {
    guard(|| {
        if cloud.is_null() {
            return fail(VfStatus::NullPointer, "cloud is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_pcf(&path, (*cloud).0.points()) {
            Ok(()) => VfStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_len(cloud: *const VfCloud) -> usize {
    if cloud.is_null() {
        0
    } else {
        (*cloud).0.len()
    }
}

/// Copy the points into `xyz`, which holds `capacity` doubles.
///
/// # Safety
/// `cloud` must be a live handle and `xyz` writable for `capacity`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_copy_points(cloud: *const VfCloud, xyz: *mut f64, capacity: usize) -> VfStatus {
    guard(|| {
        if cloud.is_null() || xyz.is_null() {
            return fail(VfStatus::NullPointer, "null argument to vf_cloud_copy_points");
        }
        let pts = (*cloud).0.points();
        if capacity < 3 * pts.len() {
            return fail(
                VfStatus::BufferTooSmall,
                format!("need {} doubles, got {capacity}", 3 * pts.len()),
            );
        }
        let dst = std::slice::from_raw_parts_mut(xyz, 3 * pts.len());
        for (d, p) in dst.chunks_exact_mut(3).zip(pts) {
            d.copy_from_slice(p);
        }
        VfStatus::Ok
    })
}

/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_cloud_free(cloud: *mut VfCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Initialize a model from TOML configuration text (null for defaults)
/// and a seed.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_model_new(config_toml: *const c_char, seed: u64, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return fail(VfStatus::NullPointer, "out is null");
        }
        let cfg = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
                return fail(VfStatus::InvalidUtf8, "configuration is not UTF-8");
            };
            match TrainConfig::from_toml(text) {
                Ok(c) => c,
                Err(e) => return from_error(e),
            }
        };
        match Model::new(&cfg.model, seed) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(VfModel(m)));
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Load the model stored in a checkpoint (its sidecar must sit next to
/// it).
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return fail(VfStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(&path).and_then(|c| c.restore(&path)) {
            Ok((m, _)) => {
                *out = Box::into_raw(Box::new(VfModel(m)));
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Trainable scalar count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_param_count(model: *const VfModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).0.param_count()
    }
}

/// Points in every completion, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_output_points(model: *const VfModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).0.config.n_out
    }
}

/// Smallest partial cloud the model accepts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_min_input_points(model: *const VfModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).0.config.min_input_points()
    }
}

/// Complete `partial`; the result is a new cloud owned by the caller.
///
/// # Safety
/// Handles must be live and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_model_complete(
    model: *const VfModel,
    partial: *const VfCloud,
    out: *mut *mut VfCloud,
) -> VfStatus {
    guard(|| {
        if model.is_null() || partial.is_null() || out.is_null() {
            return fail(VfStatus::NullPointer, "null argument to vf_model_complete");
        }
        match (*model).0.complete(&(*partial).0) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(VfCloud(c)));
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Symmetric chamfer distance (mean squared nearest-neighbor distance
/// each way).
///
/// # Safety
/// Handles must be live and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_chamfer_distance(a: *const VfCloud, b: *const VfCloud, out: *mut f64) -> VfStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(VfStatus::NullPointer, "null argument to vf_chamfer_distance");
        }
        match chamfer((*a).0.points(), (*b).0.points()) {
            Ok(v) => {
                *out = v;
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// F-score of `prediction` against `truth` at distance `tau`.
///
/// # Safety
/// Handles must be live and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn vf_f_score(
    truth: *const VfCloud,
    prediction: *const VfCloud,
    tau: f64,
    out: *mut f64,
) -> VfStatus {
    guard(|| {
        if truth.is_null() || prediction.is_null() || out.is_null() {
            return fail(VfStatus::NullPointer, "null argument to vf_f_score");
        }
        match f_score((*truth).0.points(), (*prediction).0.points(), tau) {
            Ok(v) => {
                *out = v;
                VfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
