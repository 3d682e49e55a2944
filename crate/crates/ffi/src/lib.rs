//! C ABI over the `pgcr` models and metrics.
//!
//! Models are opaque handles created by `*_load` and released by `*_free`.
//! Every fallible call returns a [`PgcrStatus`]; on failure the message is
//! available from [`pgcr_last_error`] on the same thread until the next
//! failing call. Images are interleaved 8-bit RGB, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pgcr::checkpoint::{load_discriminator, load_generator};
use pgcr::data::normalize;
use pgcr::discriminator::{discriminate, DiscriminatorModel};
use pgcr::generator::GeneratorModel;
use pgcr::metrics::{psnr, ssim, ImageU8};
use pgcr::workflow::infer_image;
use pgcr::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgcrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Data = 6,
    NonFinite = 7,
    Panic = 8,
    Other = 9,
}

/// A loaded generator.
pub struct PgcrGenerator {
    model: GeneratorModel,
}

/// A loaded discriminator.
pub struct PgcrDiscriminator {
    model: DiscriminatorModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PgcrStatus {
    match e {
        Error::Shape(_) => PgcrStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => PgcrStatus::InvalidArgument,
        Error::NonFinite(_) => PgcrStatus::NonFinite,
        Error::Data(_) => PgcrStatus::Data,
        Error::Checkpoint(_) => PgcrStatus::Checkpoint,
        Error::Io { .. } | Error::Image { .. } => PgcrStatus::Io,
        _ => PgcrStatus::Other,
    }
}

struct Fail(PgcrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PgcrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PgcrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgcrStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PgcrStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(PgcrStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize) -> Result<ImageU8, Fail> {
    if rgb.is_null() {
        return Err(null("image"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Fail(PgcrStatus::InvalidArgument, "image size overflows".into()))?;
    let bytes = std::slice::from_raw_parts(rgb, n).to_vec();
    Ok(ImageU8::new(width, height, bytes)?)
}

unsafe fn out_slice<'a, T>(out: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Fail(PgcrStatus::Shape, format!("{what} holds {len} values, {needed} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(out, needed))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pgcr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pgcr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a generator checkpoint into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pgcr_generator_load(path: *const c_char, out: *mut *mut PgcrGenerator) -> PgcrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = load_generator(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PgcrGenerator { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`pgcr_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgcr_generator_free(handle: *mut PgcrGenerator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Side length of the square images the generator produces, or 0 for null.
///
/// # Safety
/// `handle` must be null or a live generator.
#[no_mangle]
pub unsafe extern "C" fn pgcr_generator_image_size(handle: *const PgcrGenerator) -> usize {
    handle.as_ref().map_or(0, |h| h.model.config.grid.image_size)
}

/// Removes clouds from a `width`×`height` image. Larger inputs are centre
/// cropped to the generator's size `S`; `out` receives `S·S·3` bytes.
///
/// # Safety
/// `rgb` must hold `width·height·3` bytes and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pgcr_generator_run(
    handle: *const PgcrGenerator,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut u8,
    out_len: usize,
) -> PgcrStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("generator"))?;
        let img = image_arg(rgb, width, height)?;
        let s = h.model.config.grid.image_size;
        let dst = out_slice(out, out_len, s * s * 3, "out")?;
        let result = infer_image(&h.model, &img)?;
        dst.copy_from_slice(&result.data);
        Ok(())
    })
}

/// Loads a discriminator checkpoint into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pgcr_discriminator_load(path: *const c_char, out: *mut *mut PgcrDiscriminator) -> PgcrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = load_discriminator(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PgcrDiscriminator { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`pgcr_discriminator_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgcr_discriminator_free(handle: *mut PgcrDiscriminator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of patch scores per image, or 0 for null.
///
/// # Safety
/// `handle` must be null or a live discriminator.
#[no_mangle]
pub unsafe extern "C" fn pgcr_discriminator_num_patches(handle: *const PgcrDiscriminator) -> usize {
    handle.as_ref().map_or(0, |h| h.model.config.grid.num_patches())
}

/// Per-patch probabilities that an image is real, in raster patch order.
/// The image must match the discriminator's grid exactly.
///
/// # Safety
/// `rgb` must hold `width·height·3` bytes and `scores` at least `scores_len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn pgcr_discriminator_run(
    handle: *const PgcrDiscriminator,
    rgb: *const u8,
    width: usize,
    height: usize,
    scores: *mut f32,
    scores_len: usize,
) -> PgcrStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("discriminator"))?;
        let img = image_arg(rgb, width, height)?;
        let dst = out_slice(scores, scores_len, h.model.config.grid.num_patches(), "scores")?;
        let p = discriminate(&h.model, &normalize(&img))?;
        dst.copy_from_slice(p.data());
        Ok(())
    })
}

/// PSNR in dB between two images of the same size; identical images give
/// positive infinity.
///
/// # Safety
/// `a` and `b` must each hold `width·height·3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgcr_psnr(a: *const u8, b: *const u8, width: usize, height: usize, out: *mut f64) -> PgcrStatus {
    guard(|| {
        let dst = out.as_mut().ok_or_else(|| null("out"))?;
        *dst = psnr(&image_arg(a, width, height)?, &image_arg(b, width, height)?)?;
        Ok(())
    })
}

/// Mean SSIM between two images of the same size, at least 11×11.
///
/// # Safety
/// `a` and `b` must each hold `width·height·3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgcr_ssim(a: *const u8, b: *const u8, width: usize, height: usize, out: *mut f64) -> PgcrStatus {
    guard(|| {
        let dst = out.as_mut().ok_or_else(|| null("out"))?;
        *dst = ssim(&image_arg(a, width, height)?, &image_arg(b, width, height)?)?;
        Ok(())
    })
}
