//! C interface for the georefine refiner: load a trained checkpoint, run
//! tiled inference on caller-owned buffers, and report failures through
//! error codes plus a per-thread message string.
//!
//! The generated header lands in `include/georefine.h`.
//!
//! Buffer layout is channel-major, row-major within a channel: a 3-channel
//! image of extent HxW is `[3 * H * W]` floats ordered c, then y, then x.
//! Depth maps are `[H * W]`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, c_float, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use georefine::checkpoint::TrainState;
use georefine::infer::{infer, InferOptions};
use georefine::model::ModelParams;
use georefine::tensor::Tensor;
use georefine::Error;

/// Success.
pub const GRF_OK: i32 = 0;
/// A required pointer argument was null.
pub const GRF_ERR_NULL: i32 = 1;
/// The checkpoint could not be read or is not a valid checkpoint.
pub const GRF_ERR_FORMAT: i32 = 2;
/// Buffer extents are unusable (zero, overflowing, or not divisible by the
/// model's token cell).
pub const GRF_ERR_SHAPE: i32 = 3;
/// Inference failed at runtime (non-finite values, internal panic).
pub const GRF_ERR_RUNTIME: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn code_for(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Checkpoint(_) | Error::Parse { .. } => GRF_ERR_FORMAT,
        Error::Shape { .. } | Error::Config(_) => GRF_ERR_SHAPE,
        _ => GRF_ERR_RUNTIME,
    }
}

fn fail(err: &Error) -> i32 {
    set_error(&err.to_string());
    code_for(err)
}

/// Run `body` with panics converted to `GRF_ERR_RUNTIME`; an unwind across
/// the C boundary would otherwise abort the process.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("panic: {msg}"));
            GRF_ERR_RUNTIME
        }
    }
}

/// Opaque handle owning a loaded refiner model.
pub struct grf_refiner {
    params: ModelParams,
}

/// Message for the most recent failure on the calling thread, as a
/// NUL-terminated string. Empty if no call has failed yet. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn grf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a refiner from a checkpoint file.
///
/// On success writes a handle to `*out` and returns `GRF_OK`. The handle
/// must be released with `grf_refiner_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn grf_refiner_load(
    path: *const c_char,
    out: *mut *mut grf_refiner,
) -> i32 {
    guarded(|| {
        if path.is_null() || out.is_null() {
            set_error("grf_refiner_load: null argument");
            return GRF_ERR_NULL;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("grf_refiner_load: path is not valid UTF-8");
                return GRF_ERR_FORMAT;
            }
        };
        match TrainState::load(Path::new(path)) {
            Ok(state) => {
                let handle = Box::new(grf_refiner { params: state.params });
                unsafe { *out = Box::into_raw(handle) };
                GRF_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a handle returned by `grf_refiner_load`. Null is a no-op.
///
/// # Safety
/// `handle` must be null or a pointer returned by `grf_refiner_load` that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn grf_refiner_free(handle: *mut grf_refiner) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

fn tensor_from(shape: &[usize], data: &[c_float]) -> Tensor {
    // Shape product equals data length by construction at both call sites.
    Tensor::new(shape, data.iter().map(|&v| v as f64).collect()).unwrap()
}

/// Refine one frame.
///
/// Inputs: `rgb` and `coarse_normal` are `[3 * h * w]`, `coarse_depth` is
/// `[h * w]`; see the module docs for the layout. Outputs are written to
/// `out_depth` (`[h * w]`) and `out_normal` (`[3 * h * w]`, unit vectors).
/// `h` and `w` must be divisible by the model's token cell.
///
/// # Safety
/// All pointers must be non-null and the buffers behind them at least the
/// sizes stated above; `out_depth` and `out_normal` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grf_refiner_infer(
    handle: *const grf_refiner,
    rgb: *const c_float,
    coarse_depth: *const c_float,
    coarse_normal: *const c_float,
    h: usize,
    w: usize,
    out_depth: *mut c_float,
    out_normal: *mut c_float,
) -> i32 {
    guarded(|| {
        if handle.is_null()
            || rgb.is_null()
            || coarse_depth.is_null()
            || coarse_normal.is_null()
            || out_depth.is_null()
            || out_normal.is_null()
        {
            set_error("grf_refiner_infer: null argument");
            return GRF_ERR_NULL;
        }
        let Some(px) = h.checked_mul(w).filter(|&px| px > 0) else {
            set_error(&format!("grf_refiner_infer: bad extent {h}x{w}"));
            return GRF_ERR_SHAPE;
        };
        let Some(px3) = px.checked_mul(3) else {
            set_error(&format!("grf_refiner_infer: bad extent {h}x{w}"));
            return GRF_ERR_SHAPE;
        };
        let params = unsafe { &(*handle).params };
        let rgb = tensor_from(&[3, h, w], unsafe { std::slice::from_raw_parts(rgb, px3) });
        let depth = tensor_from(&[h, w], unsafe { std::slice::from_raw_parts(coarse_depth, px) });
        let normal =
            tensor_from(&[3, h, w], unsafe { std::slice::from_raw_parts(coarse_normal, px3) });
        match infer(params, &rgb, &depth, &normal, &InferOptions::default()) {
            Ok(result) => {
                let out_d = unsafe { std::slice::from_raw_parts_mut(out_depth, px) };
                for (dst, &src) in out_d.iter_mut().zip(result.depth.data()) {
                    *dst = src as c_float;
                }
                let out_n = unsafe { std::slice::from_raw_parts_mut(out_normal, px3) };
                for (dst, &src) in out_n.iter_mut().zip(result.normal.data()) {
                    *dst = src as c_float;
                }
                GRF_OK
            }
            Err(e) => fail(&e),
        }
    })
}
