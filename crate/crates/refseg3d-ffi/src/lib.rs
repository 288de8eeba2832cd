//! C ABI over the refseg3d core: load a checkpoint, run referring-expression
//! segmentation over raw point/feature/text buffers, read back a point mask.
//!
//! Conventions:
//! - every function returns a [`RefsegStatus`]; anything but `Ok` leaves a
//!   message retrievable through [`refseg_last_error`] on the same thread
//! - the model handle is opaque; create with [`refseg_model_load`], release
//!   with [`refseg_model_free`]
//! - strings returned as `*mut c_char` are owned by the caller and must be
//!   released with [`refseg_string_free`]
//!
//! The generated header lands in `include/refseg3d.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use refseg3d::dense::Mat;
use refseg3d::geometry::Scene;
use refseg3d::model::params::{load_checkpoint, ParamStore};
use refseg3d::model::{forward, infer_gres, infer_res, ModelConfig, RawFeatures, SceneInputs};
use refseg3d::tensor::Tape;

/// Result of every FFI call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefsegStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Inputs were structurally invalid (shapes, labels, mode).
    InvalidArgument = 2,
    /// The checkpoint could not be read.
    Io = 3,
    /// The model rejected the inputs or failed during the forward pass.
    Model = 4,
    /// A panic was caught at the boundary; state may be stale but memory is safe.
    Internal = 5,
}

/// Inference modes accepted by [`refseg_infer`].
pub const REFSEG_MODE_RES: i32 = 0;
pub const REFSEG_MODE_GRES: i32 = 1;

/// Opaque handle to a loaded model (config plus parameters).
pub struct RefsegModel {
    cfg: ModelConfig,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: RefsegStatus, msg: impl std::fmt::Display) -> RefsegStatus {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
    status
}

fn guard(body: impl FnOnce() -> RefsegStatus) -> RefsegStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(RefsegStatus::Internal, "panic caught at the FFI boundary"),
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
/// Returns an empty string when nothing has failed yet.
#[no_mangle]
pub extern "C" fn refseg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn refseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint directory (`index.json` plus tensor blobs) and hands
/// back an owned model handle through `out_model`.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out_model` to writable
/// pointer storage; both only need to stay valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_load(
    path: *const c_char,
    out_model: *mut *mut RefsegModel,
) -> RefsegStatus {
    guard(|| {
        if path.is_null() || out_model.is_null() {
            return fail(RefsegStatus::NullArgument, "path and out_model must be non-null");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(e) => return fail(RefsegStatus::InvalidArgument, format!("path is not UTF-8: {e}")),
        };
        match load_checkpoint(Path::new(path)) {
            Ok((cfg, store)) => {
                let handle = Box::new(RefsegModel { cfg, store });
                unsafe { *out_model = Box::into_raw(handle) };
                RefsegStatus::Ok
            }
            Err(e) => fail(RefsegStatus::Io, format!("load {path}: {e:#}")),
        }
    })
}

/// Releases a handle from [`refseg_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by [`refseg_model_load`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_free(model: *mut RefsegModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Model configuration as a JSON document. The returned string is owned by
/// the caller; release it with [`refseg_string_free`]. Returns null on error.
///
/// # Safety
/// `model` must be a live handle from [`refseg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn refseg_model_config_json(model: *const RefsegModel) -> *mut c_char {
    let Some(model) = (unsafe { model.as_ref() }) else {
        fail(RefsegStatus::NullArgument, "model must be non-null");
        return std::ptr::null_mut();
    };
    match serde_json::to_string(&model.cfg) {
        Ok(json) => CString::new(json).map(CString::into_raw).unwrap_or(std::ptr::null_mut()),
        Err(e) => {
            fail(RefsegStatus::Internal, format!("serialize config: {e}"));
            std::ptr::null_mut()
        }
    }
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from a refseg function documented to transfer string
/// ownership, and must not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn refseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Number of trainable parameter values in the model, for sanity checks.
///
/// # Safety
/// `model` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn refseg_model_num_params(
    model: *const RefsegModel,
    out_count: *mut usize,
) -> RefsegStatus {
    guard(|| {
        let (Some(model), false) = (unsafe { model.as_ref() }, out_count.is_null()) else {
            return fail(RefsegStatus::NullArgument, "model and out_count must be non-null");
        };
        unsafe { *out_count = model.store.num_values() };
        RefsegStatus::Ok
    })
}

/// Segments the points referred to by a text-feature matrix.
///
/// Layout (all row-major f64):
/// - `points`: `n_points x 3` coordinates
/// - `features`: `n_points x feature_dim` per-point features; `feature_dim`
///   must match the checkpoint's 3D feature width
/// - `superpoint_ids`: `n_points` labels forming a dense `[0, n_superpoints)`
///   cover
/// - `text`: `n_tokens x text_dim` text embeddings
/// - `mode`: `REFSEG_MODE_RES` (single best query) or `REFSEG_MODE_GRES`
///   (union of confident queries, possibly empty)
/// - `out_mask`: `n_points` bytes, written as 0/1 per point
///
/// # Safety
/// Every pointer must reference a buffer of the documented length, valid for
/// the duration of the call; buffers must not alias `out_mask`.
#[no_mangle]
pub unsafe extern "C" fn refseg_infer(
    model: *const RefsegModel,
    points: *const f64,
    n_points: usize,
    features: *const f64,
    feature_dim: usize,
    superpoint_ids: *const usize,
    text: *const f64,
    n_tokens: usize,
    text_dim: usize,
    mode: i32,
    out_mask: *mut u8,
) -> RefsegStatus {
    guard(|| {
        if model.is_null()
            || points.is_null()
            || features.is_null()
            || superpoint_ids.is_null()
            || text.is_null()
            || out_mask.is_null()
        {
            return fail(RefsegStatus::NullArgument, "all buffer arguments must be non-null");
        }
        let model = unsafe { &*model };
        if n_points == 0 || n_tokens == 0 || feature_dim == 0 || text_dim == 0 {
            return fail(RefsegStatus::InvalidArgument, "all dimensions must be positive");
        }
        if mode != REFSEG_MODE_RES && mode != REFSEG_MODE_GRES {
            return fail(RefsegStatus::InvalidArgument, format!("unknown mode {mode}"));
        }
        let points = unsafe { std::slice::from_raw_parts(points, n_points * 3) };
        let features = unsafe { std::slice::from_raw_parts(features, n_points * feature_dim) };
        let superpoint_id = unsafe { std::slice::from_raw_parts(superpoint_ids, n_points) };
        let text = unsafe { std::slice::from_raw_parts(text, n_tokens * text_dim) };

        let scene = Scene {
            points: Mat::new(n_points, 3, points.to_vec()),
            point_features: Mat::new(n_points, feature_dim, features.to_vec()),
            superpoint_id: superpoint_id.to_vec(),
            gt_instances: Vec::new(),
            expression_id: "ffi".into(),
        };
        let text_raw = Mat::new(n_tokens, text_dim, text.to_vec());
        let inputs = match SceneInputs::prepare(&scene, &RawFeatures, &[], text_raw, &model.cfg) {
            Ok(inputs) => inputs,
            Err(e) => return fail(RefsegStatus::InvalidArgument, e),
        };
        let tape = Tape::new();
        let p = model.store.leaves(&tape, false);
        let out = match forward(&inputs, &model.cfg, &p) {
            Ok(out) => out,
            Err(e) => return fail(RefsegStatus::Model, e),
        };
        let mask = match mode {
            REFSEG_MODE_RES => infer_res(&out.queries, &inputs.sp, n_points),
            _ => infer_gres(&out.queries, &inputs.sp, n_points),
        };
        let out_mask = unsafe { std::slice::from_raw_parts_mut(out_mask, n_points) };
        for (slot, &b) in out_mask.iter_mut().zip(&mask) {
            *slot = b as u8;
        }
        RefsegStatus::Ok
    })
}

#[cfg(test)]
mod tests;
