//! C ABI over the `opstego` library.
//!
//! Models are opaque heap handles created by `opstego_model_load` or
//! `opstego_model_new` and released with `opstego_model_free`. Every fallible
//! call returns an [`OpstegoStatus`]; on failure a description is kept per
//! thread and can be copied out with `opstego_last_error`.
//!
//! Images cross the boundary as interleaved 8-bit RGB (`height * width * 3`
//! bytes, row-major). Messages are one byte per bit, each 0 or 1.
//! Concealment and recovery only read the model, so one handle may be used
//! from several threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use opstego::harness::dataset::{rgb_bytes_to_tensor, tensor_to_rgb};
use opstego::layout::{capacity_bpp, BitMessage, LayoutConfig};
use opstego::model::{ModelConfig, StegoModel};
use opstego::StegoError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpstegoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Layout = 6,
    Dimension = 7,
    Data = 8,
    Numeric = 9,
    State = 10,
    Image = 11,
    Panic = 12,
}

/// Opaque model handle.
pub struct OpstegoModel {
    inner: StegoModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &StegoError) -> OpstegoStatus {
    match e {
        StegoError::Dimension(_) => OpstegoStatus::Dimension,
        StegoError::Config(_) => OpstegoStatus::Config,
        StegoError::Layout(_) => OpstegoStatus::Layout,
        StegoError::Data(_) => OpstegoStatus::Data,
        StegoError::Numeric(_) => OpstegoStatus::Numeric,
        StegoError::State(_) => OpstegoStatus::State,
        StegoError::Format(_) => OpstegoStatus::Format,
        StegoError::Image(_) => OpstegoStatus::Image,
        StegoError::Io(_) => OpstegoStatus::Io,
    }
}

enum Fail {
    Status(OpstegoStatus, String),
    Lib(StegoError),
}

impl From<StegoError> for Fail {
    fn from(e: StegoError) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OpstegoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OpstegoStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OpstegoStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(OpstegoStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Fail {
    Fail::Status(OpstegoStatus::InvalidArgument, msg)
}

unsafe fn model_ref<'a>(m: *const OpstegoModel) -> Result<&'a StegoModel, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn bytes_mut<'a>(p: *mut u8, len: usize, what: &str) -> Result<&'a mut [u8], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn image_from(model: &StegoModel, rgb: &[u8]) -> Result<opstego::tensor::Tensor<f32>, Fail> {
    let (h, w) = (model.config.height, model.config.width);
    if rgb.len() != h * w * 3 {
        return Err(invalid(format!("image buffer has {} bytes, expected {h} * {w} * 3", rgb.len())));
    }
    Ok(rgb_bytes_to_tensor(rgb, h, w)?)
}

unsafe fn give(out: *mut *mut OpstegoModel, model: StegoModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(OpstegoModel { inner: model }));
    Ok(())
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn opstego_model_load(path: *const c_char, out: *mut *mut OpstegoModel) -> OpstegoStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
        give(out, StegoModel::load(p)?)
    })
}

/// Creates an untrained model with default settings except the given sizes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn opstego_model_new(
    l_ms: u32,
    n_r: u32,
    height: u32,
    width: u32,
    window: u32,
    seed: u64,
    out: *mut *mut OpstegoModel,
) -> OpstegoStatus {
    guard(|| {
        let cfg = ModelConfig {
            l_ms: l_ms as usize,
            n_r,
            height: height as usize,
            width: width as usize,
            window: window as usize,
            ..Default::default()
        };
        give(out, StegoModel::new(cfg, seed)?)
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn opstego_model_save(model: *const OpstegoModel, path: *const c_char) -> OpstegoStatus {
    guard(|| {
        let m = model_ref(model)?;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
        Ok(m.save(p)?)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opstego_model_free(model: *mut OpstegoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image height, width and message length in bits of a model.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn opstego_model_dims(
    model: *const OpstegoModel,
    height: *mut usize,
    width: *mut usize,
    bits: *mut usize,
) -> OpstegoStatus {
    guard(|| {
        let m = model_ref(model)?;
        if height.is_null() || width.is_null() || bits.is_null() {
            return Err(null("output"));
        }
        *height = m.config.height;
        *width = m.config.width;
        *bits = m.bit_len();
        Ok(())
    })
}

/// Bits per pixel carried by segment length `l_ms` and element range `n_r`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn opstego_capacity_bpp(l_ms: u32, n_r: u32, out: *mut f64) -> OpstegoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = LayoutConfig::new(l_ms as usize, n_r, 64, 64);
        cfg.height = 16 * cfg.coarsest_scale();
        cfg.width = cfg.height;
        *out = capacity_bpp(&cfg)?;
        Ok(())
    })
}

/// Conceals `bits` in `cover` and writes the quantized stego image to `stego_out`.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn opstego_conceal(
    model: *const OpstegoModel,
    cover: *const u8,
    cover_len: usize,
    bits: *const u8,
    bits_len: usize,
    stego_out: *mut u8,
    stego_len: usize,
) -> OpstegoStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_from(m, bytes(cover, cover_len, "cover")?)?;
        if bits_len != m.bit_len() {
            return Err(Fail::Lib(StegoError::Layout(format!(
                "message has {bits_len} bits but the model carries {}",
                m.bit_len()
            ))));
        }
        let msg = BitMessage::new(bytes(bits, bits_len, "bits")?.to_vec())?;
        let out = bytes_mut(stego_out, stego_len, "stego_out")?;
        if stego_len != cover_len {
            return Err(invalid(format!("stego buffer has {stego_len} bytes, expected {cover_len}")));
        }
        let stego = m.conceal(&img, &msg)?.stego;
        out.copy_from_slice(tensor_to_rgb(&stego)?.as_raw());
        Ok(())
    })
}

/// Recovers the message carried by `stego` into `bits_out`, one byte per bit.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn opstego_recover(
    model: *const OpstegoModel,
    stego: *const u8,
    stego_len: usize,
    bits_out: *mut u8,
    bits_len: usize,
) -> OpstegoStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_from(m, bytes(stego, stego_len, "stego")?)?;
        let out = bytes_mut(bits_out, bits_len, "bits_out")?;
        if bits_len != m.bit_len() {
            return Err(invalid(format!("bit buffer holds {bits_len}, model carries {}", m.bit_len())));
        }
        out.copy_from_slice(m.recover(&img)?.bits.bits());
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn opstego_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}
