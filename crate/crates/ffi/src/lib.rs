//! C ABI for the image-coding-for-machines pipeline.
//!
//! Conventions:
//! - Every fallible call returns an `int32_t` status: 0 success, 2 usage or
//!   configuration error, 3 data error, 4 model-compatibility error.
//! - `icm_last_error_message` returns a thread-local description of the most
//!   recent failure on this thread.
//! - `IcmModel` is an opaque handle; free it with `icm_model_free`.
//! - Buffers returned through out-pointers are owned by the library and must
//!   be released with `icm_bytes_free` / `icm_doubles_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use icm::nn::ParamStore;
use icm::pipeline::Pipeline;
use icm::training::load_trained_pipeline;
use icm::IcmError;

pub const ICM_OK: i32 = 0;
pub const ICM_ERR_USAGE: i32 = 2;
pub const ICM_ERR_DATA: i32 = 3;
pub const ICM_ERR_MODEL: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(err: IcmError) -> i32 {
    set_error(&err.to_string());
    err.exit_code()
}

fn usage(msg: &str) -> i32 {
    set_error(msg);
    ICM_ERR_USAGE
}

/// Run `f` with panics converted into data errors.
fn guarded<F: FnOnce() -> i32>(f: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            ICM_ERR_DATA
        }
    }
}

/// Opaque handle to a loaded model (pipeline + parameters).
pub struct IcmModel {
    pipeline: Pipeline,
    store: ParamStore,
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn icm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, i32> {
    if ptr.is_null() {
        return Err(usage("null path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(usage("path is not valid UTF-8")),
    }
}

/// Load a trained model from a checkpoint file. `backbone_path` may be null
/// for models trained from scratch; all other modes need the pretrained
/// backbone file the checkpoint references.
///
/// # Safety
/// `ckpt_path` (and `backbone_path` when non-null) must be valid C strings;
/// `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icm_model_load(
    ckpt_path: *const c_char,
    backbone_path: *const c_char,
    out_model: *mut *mut IcmModel,
) -> i32 {
    guarded(|| {
        if out_model.is_null() {
            return usage("null out_model");
        }
        let ckpt = match path_arg(ckpt_path) {
            Ok(p) => p,
            Err(c) => return c,
        };
        let backbone = if backbone_path.is_null() {
            None
        } else {
            match path_arg(backbone_path) {
                Ok(p) => Some(p),
                Err(c) => return c,
            }
        };
        match load_trained_pipeline(ckpt, backbone) {
            Ok((pipeline, store, _cfg)) => {
                *out_model = Box::into_raw(Box::new(IcmModel { pipeline, store }));
                ICM_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Free a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by `icm_model_load` (or null) and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn icm_model_free(model: *mut IcmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Task identifier of a loaded model ("semseg", "depth", "normal",
/// "boundary" or "saliency"); the pointer is static.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn icm_model_task(model: *const IcmModel) -> *const c_char {
    if model.is_null() {
        return std::ptr::null();
    }
    let s = (*model).pipeline.spec.id.as_str();
    // task names are static NUL-free ASCII; append the terminator once
    match s {
        "semseg" => c"semseg".as_ptr(),
        "depth" => c"depth".as_ptr(),
        "normal" => c"normal".as_ptr(),
        "boundary" => c"boundary".as_ptr(),
        _ => c"saliency".as_ptr(),
    }
}

/// Generate a deterministic synthetic scene and write its image into
/// `out_image` as `3 * height * width` doubles in (channel, row, col) order.
///
/// # Safety
/// `out_image` must point to at least `3 * height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn icm_scene_generate(
    seed: u64,
    height: usize,
    width: usize,
    k_shapes: usize,
    out_image: *mut f64,
) -> i32 {
    guarded(|| {
        if out_image.is_null() {
            return usage("null out_image");
        }
        match icm::synth::generate_scene(seed, height, width, k_shapes) {
            Ok(scene) => {
                let flat: Vec<f64> = scene.image.iter().copied().collect();
                std::ptr::copy_nonoverlapping(flat.as_ptr(), out_image, flat.len());
                ICM_OK
            }
            Err(e) => fail(e),
        }
    })
}

fn export_bytes(v: Vec<u8>, out_ptr: *mut *mut u8, out_len: *mut usize) -> i32 {
    let boxed = v.into_boxed_slice();
    unsafe {
        *out_len = boxed.len();
        *out_ptr = Box::into_raw(boxed) as *mut u8;
    }
    ICM_OK
}

/// Compress one image (`3 * height * width` doubles, (c, y, x) order) into a
/// standalone bitstream. The buffer written to `out_bytes` must be freed with
/// `icm_bytes_free`.
///
/// # Safety
/// `model` must be a valid handle, `image` must point to `3 * height * width`
/// doubles, and `out_bytes` / `out_len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn icm_compress(
    model: *mut IcmModel,
    image: *const f64,
    height: usize,
    width: usize,
    lambda_index: u8,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> i32 {
    guarded(|| {
        if model.is_null() || image.is_null() || out_bytes.is_null() || out_len.is_null() {
            return usage("null argument");
        }
        let m = &mut *model;
        let n = 3 * height * width;
        let data = std::slice::from_raw_parts(image, n).to_vec();
        let batch = ArrayD::from_shape_vec(IxDyn(&[1, 3, height, width]), data).unwrap();
        match m.pipeline.compress(&mut m.store, &batch, lambda_index) {
            Ok(bytes) => export_bytes(bytes, out_bytes, out_len),
            Err(e) => fail(e),
        }
    })
}

/// Decompress a bitstream into the model's dense prediction. On success
/// `out_pred` holds `channels * height * width` doubles ((c, y, x) order,
/// free with `icm_doubles_free`) and the dims are written to the out
/// parameters.
///
/// # Safety
/// `model` must be a valid handle, `bytes` must point to `len` readable
/// bytes, and all out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn icm_decompress(
    model: *mut IcmModel,
    bytes: *const u8,
    len: usize,
    out_pred: *mut *mut f64,
    out_channels: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> i32 {
    guarded(|| {
        if model.is_null()
            || bytes.is_null()
            || out_pred.is_null()
            || out_channels.is_null()
            || out_height.is_null()
            || out_width.is_null()
        {
            return usage("null argument");
        }
        let m = &mut *model;
        let stream = std::slice::from_raw_parts(bytes, len);
        match m.pipeline.decompress(&m.store, stream) {
            Ok((pred, _header, _bpp)) => {
                let s = pred.shape().to_vec(); // (1, C, H, W)
                let flat: Vec<f64> = pred.iter().copied().collect();
                let boxed = flat.into_boxed_slice();
                *out_channels = s[1];
                *out_height = s[2];
                *out_width = s[3];
                *out_pred = Box::into_raw(boxed) as *mut f64;
                ICM_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Free a byte buffer returned by this library.
///
/// # Safety
/// `(ptr, len)` must come from a successful `icm_compress`; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn icm_bytes_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// Free a double buffer returned by this library.
///
/// # Safety
/// `(ptr, len)` must come from a successful `icm_decompress` with
/// `len = channels * height * width`; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn icm_doubles_free(ptr: *mut f64, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}
