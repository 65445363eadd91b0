//! Exercises the C entry points from Rust: the wrapper must agree bitwise
//! with the underlying library and hand back the documented error codes.

use std::ffi::{c_float, CStr, CString};
use std::ptr;

use georefine::checkpoint::TrainState;
use georefine::infer::{infer, InferOptions};
use georefine::model::{ModelDims, ModelParams};
use georefine::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use georefine_ffi::{
    grf_last_error, grf_refiner_free, grf_refiner_infer, grf_refiner_load, GRF_ERR_FORMAT,
    GRF_ERR_NULL, GRF_ERR_SHAPE, GRF_OK,
};

fn tiny_dims() -> ModelDims {
    ModelDims { blocks: 1, width: 8, heads: 2, cell: 2 }
}

fn saved_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ModelParams::init(tiny_dims(), &mut rng).unwrap();
    let state = TrainState {
        params,
        iteration: 0,
        adam: None,
        rng_seed: [0u8; 32],
        rng_word_pos: 0,
    };
    let path = dir.join("tiny.ckpt");
    state.save(&path).unwrap();
    path
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(grf_last_error()) }.to_str().unwrap().to_string()
}

/// An 8x8 frame with spatial structure in every input channel.
fn test_frame(h: usize, w: usize) -> (Vec<c_float>, Vec<c_float>, Vec<c_float>) {
    let mut rgb = vec![0.0f32; 3 * h * w];
    let mut depth = vec![0.0f32; h * w];
    let mut normal = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            depth[i] = 2.0 + 0.01 * x as f32 + 0.02 * y as f32;
            for c in 0..3 {
                rgb[c * h * w + i] = ((c + 1) as f32 * (i as f32 + 0.5)) / (4.0 * (h * w) as f32);
            }
            // A tilted but unnormalized direction; the library handles the
            // normalization, the wrapper must not care.
            normal[i] = 0.1;
            normal[h * w + i] = -0.2;
            normal[2 * h * w + i] = 0.97;
        }
    }
    (rgb, depth, normal)
}

#[test]
fn null_arguments_are_rejected() {
    let mut out: *mut georefine_ffi::grf_refiner = ptr::null_mut();
    assert_eq!(unsafe { grf_refiner_load(ptr::null(), &mut out) }, GRF_ERR_NULL);
    assert!(last_error().contains("null"));

    let path = CString::new("/nonexistent").unwrap();
    assert_eq!(unsafe { grf_refiner_load(path.as_ptr(), ptr::null_mut()) }, GRF_ERR_NULL);

    let (rgb, depth, normal) = test_frame(2, 2);
    let mut out_d = vec![0.0f32; 4];
    let mut out_n = vec![0.0f32; 12];
    let code = unsafe {
        grf_refiner_infer(
            ptr::null(),
            rgb.as_ptr(),
            depth.as_ptr(),
            normal.as_ptr(),
            2,
            2,
            out_d.as_mut_ptr(),
            out_n.as_mut_ptr(),
        )
    };
    assert_eq!(code, GRF_ERR_NULL);
}

#[test]
fn missing_checkpoint_reports_format_error() {
    let path = CString::new("/no/such/file.ckpt").unwrap();
    let mut out: *mut georefine_ffi::grf_refiner = ptr::null_mut();
    assert_eq!(unsafe { grf_refiner_load(path.as_ptr(), &mut out) }, GRF_ERR_FORMAT);
    assert!(out.is_null());
    assert!(last_error().contains("file.ckpt"), "message: {}", last_error());
}

#[test]
fn corrupt_checkpoint_reports_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut out: *mut georefine_ffi::grf_refiner = ptr::null_mut();
    assert_eq!(unsafe { grf_refiner_load(cpath.as_ptr(), &mut out) }, GRF_ERR_FORMAT);
    assert!(out.is_null());
}

#[test]
fn infer_matches_the_library_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = saved_checkpoint(dir.path());

    let (h, w) = (8usize, 8usize);
    let (rgb, depth, normal) = test_frame(h, w);

    // Reference: the library called on the same f32-quantized inputs.
    let as_tensor = |shape: &[usize], data: &[c_float]| {
        Tensor::new(shape, data.iter().map(|&v| v as f64).collect()).unwrap()
    };
    let state = TrainState::load(&ckpt).unwrap();
    let want = infer(
        &state.params,
        &as_tensor(&[3, h, w], &rgb),
        &as_tensor(&[h, w], &depth),
        &as_tensor(&[3, h, w], &normal),
        &InferOptions::default(),
    )
    .unwrap();

    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut handle: *mut georefine_ffi::grf_refiner = ptr::null_mut();
    assert_eq!(unsafe { grf_refiner_load(cpath.as_ptr(), &mut handle) }, GRF_OK);
    assert!(!handle.is_null());

    let mut out_d = vec![0.0f32; h * w];
    let mut out_n = vec![0.0f32; 3 * h * w];
    let code = unsafe {
        grf_refiner_infer(
            handle,
            rgb.as_ptr(),
            depth.as_ptr(),
            normal.as_ptr(),
            h,
            w,
            out_d.as_mut_ptr(),
            out_n.as_mut_ptr(),
        )
    };
    assert_eq!(code, GRF_OK, "infer failed: {}", last_error());

    for (got, &ref_v) in out_d.iter().zip(want.depth.data()) {
        assert_eq!(got.to_bits(), (ref_v as f32).to_bits());
    }
    for (got, &ref_v) in out_n.iter().zip(want.normal.data()) {
        assert_eq!(got.to_bits(), (ref_v as f32).to_bits());
    }

    unsafe { grf_refiner_free(handle) };
    unsafe { grf_refiner_free(ptr::null_mut()) };
}

#[test]
fn odd_extent_reports_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = saved_checkpoint(dir.path());
    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut handle: *mut georefine_ffi::grf_refiner = ptr::null_mut();
    assert_eq!(unsafe { grf_refiner_load(cpath.as_ptr(), &mut handle) }, GRF_OK);

    // 7 is not divisible by the cell (2).
    let (rgb, depth, normal) = test_frame(7, 7);
    let mut out_d = vec![0.0f32; 49];
    let mut out_n = vec![0.0f32; 147];
    let code = unsafe {
        grf_refiner_infer(
            handle,
            rgb.as_ptr(),
            depth.as_ptr(),
            normal.as_ptr(),
            7,
            7,
            out_d.as_mut_ptr(),
            out_n.as_mut_ptr(),
        )
    };
    assert_eq!(code, GRF_ERR_SHAPE);
    assert!(last_error().contains("divisible"), "message: {}", last_error());

    // Zero extent is a shape error, not a crash.
    let code = unsafe {
        grf_refiner_infer(
            handle,
            rgb.as_ptr(),
            depth.as_ptr(),
            normal.as_ptr(),
            0,
            7,
            out_d.as_mut_ptr(),
            out_n.as_mut_ptr(),
        )
    };
    assert_eq!(code, GRF_ERR_SHAPE);

    unsafe { grf_refiner_free(handle) };
}

#[test]
fn header_is_generated_with_the_full_surface() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/georefine.h"
    ))
    .unwrap();
    for needle in [
        "grf_refiner_load",
        "grf_refiner_infer",
        "grf_refiner_free",
        "grf_last_error",
        "GRF_ERR_SHAPE",
        "struct grf_refiner",
    ] {
        assert!(header.contains(needle), "header is missing {needle}");
    }
}
