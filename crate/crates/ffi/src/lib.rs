//! C ABI over the skelguide core: procedural objects and their renders,
//! skeleton IoU, image metrics, the Mann-Whitney test and the image codec.
//!
//! Every fallible call returns an [`SkgStatus`]; on failure a message is kept
//! per thread and read with [`skg_last_error`]. Objects cross the boundary as
//! opaque handles owned by the caller and released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use skelguide::codec::Codec;
use skelguide::evalkit::{self, Alternative};
use skelguide::scenegen::{self, ArticulatedObject, CameraPose, GeneratorConfig, RenderMode};
use skelguide::{Error, Image};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque RGB image with values in `[0, 1]`.
pub struct SkgImage(Image);

/// Opaque procedural articulated object.
pub struct SkgObject(ArticulatedObject);

/// Opaque trained codec.
pub struct SkgCodec(Codec);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SkgStatus {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } => SkgStatus::InvalidArgument,
        Error::Numeric(_) | Error::Tensor(_) => SkgStatus::Numeric,
        Error::Io { .. } => SkgStatus::Io,
        _ => SkgStatus::Data,
    }
}

/// Runs `f`, converting errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SkgStatus, String)>) -> SkgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside skelguide".into());
            SkgStatus::Panic
        }
    }
}

fn core<T>(r: skelguide::Result<T>) -> Result<T, (SkgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SkgStatus, String) {
    (SkgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, (SkgStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (SkgStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (SkgStatus, String)> {
    let s = borrow(p, "path")?;
    let s = CStr::from_ptr(s).to_str().map_err(|_| (SkgStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn skg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `height * width * 3` interleaved RGB floats into a new image.
///
/// # Safety
/// `data` must point to that many readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_image_new(height: usize, width: usize, data: *const f32, out: *mut *mut SkgImage) -> SkgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = borrow(data, "data")?;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| (SkgStatus::InvalidArgument, "image too large".into()))?;
        let v = std::slice::from_raw_parts(data, n).to_vec();
        *out = Box::into_raw(Box::new(SkgImage(core(Image::from_vec(height, width, v))?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_image_load_png(path: *const c_char, out: *mut *mut SkgImage) -> SkgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(SkgImage(core(Image::load_png(path_arg(path)?))?)));
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn skg_image_save_png(image: *const SkgImage, path: *const c_char) -> SkgStatus {
    guard(|| core(borrow(image, "image")?.0.save_png(path_arg(path)?)))
}

/// # Safety
/// `image` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_image_dims(image: *const SkgImage, height: *mut usize, width: *mut usize) -> SkgStatus {
    guard(|| {
        let (h, w) = borrow(image, "image")?.0.dims();
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        Ok(())
    })
}

/// Copies the pixels into `buffer`, which holds `len` floats (at least `h * w * 3`).
///
/// # Safety
/// `image` must be a live handle; `buffer` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn skg_image_pixels(image: *const SkgImage, buffer: *mut f32, len: usize) -> SkgStatus {
    guard(|| {
        let data = borrow(image, "image")?.0.data();
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        if len < data.len() {
            return Err((SkgStatus::InvalidArgument, format!("buffer holds {len} floats, need {}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buffer, data.len());
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn skg_image_free(image: *mut SkgImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Samples an articulated object from `seed` with the default generator settings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_object_sample(seed: u64, out: *mut *mut SkgObject) -> SkgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(SkgObject(core(scenegen::sample_object(seed, &GeneratorConfig::default()))?)));
        Ok(())
    })
}

/// # Safety
/// `object` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn skg_object_free(object: *mut SkgObject) {
    if !object.is_null() {
        drop(Box::from_raw(object));
    }
}

/// Orbit camera looking at the origin; angles in radians, focal in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SkgCamera {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub focal: f64,
    pub height: usize,
    pub width: usize,
}

impl From<SkgCamera> for CameraPose {
    fn from(c: SkgCamera) -> Self {
        CameraPose {
            azimuth: c.azimuth,
            elevation: c.elevation,
            radius: c.radius,
            focal: c.focal,
            height: c.height,
            width: c.width,
        }
    }
}

/// Renders frame `frame` of `object`: the skinned body if `skeleton` is false,
/// otherwise its skeleton.
///
/// # Safety
/// `object` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_render(
    object: *const SkgObject,
    frame: usize,
    camera: SkgCamera,
    skeleton: bool,
    out: *mut *mut SkgImage,
) -> SkgStatus {
    guard(|| {
        let obj = borrow(object, "object")?;
        let out = out_ptr(out, "out")?;
        let mode = if skeleton { RenderMode::Skeleton } else { RenderMode::Skin };
        let img = core(scenegen::render_view(&obj.0, frame, &camera.into(), mode))?;
        *out = Box::into_raw(Box::new(SkgImage(img)));
        Ok(())
    })
}

/// Bounding-box IoU between the foreground of an object render and a skeleton render.
///
/// # Safety
/// Both images must be live handles; `iou` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_bbox_iou(
    object_image: *const SkgImage,
    skeleton_image: *const SkgImage,
    iou: *mut f64,
) -> SkgStatus {
    guard(|| {
        let v = core(scenegen::compute_bbox_iou(
            &borrow(object_image, "object_image")?.0,
            &borrow(skeleton_image, "skeleton_image")?.0,
        ))?;
        *out_ptr(iou, "iou")? = v;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SkgMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean absolute error, PSNR (capped at 99 dB) and SSIM between two images.
///
/// # Safety
/// Both images must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_metrics(a: *const SkgImage, b: *const SkgImage, out: *mut SkgMetrics) -> SkgStatus {
    guard(|| {
        let (a, b) = (&borrow(a, "a")?.0, &borrow(b, "b")?.0);
        let m = SkgMetrics {
            l1: core(evalkit::metric_l1(a, b))?,
            psnr: core(evalkit::metric_psnr(a, b, evalkit::PSNR_CAP))?,
            ssim: core(evalkit::metric_ssim(a, b))?,
        };
        *out_ptr(out, "out")? = m;
        Ok(())
    })
}

/// One-sided Mann-Whitney U test; `greater` selects "x stochastically greater".
///
/// # Safety
/// `x` and `y` must point to `nx` and `ny` doubles; `u` and `p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_mann_whitney_u(
    x: *const f64,
    nx: usize,
    y: *const f64,
    ny: usize,
    greater: bool,
    u: *mut f64,
    p: *mut f64,
) -> SkgStatus {
    guard(|| {
        let x = std::slice::from_raw_parts(borrow(x, "x")?, nx);
        let y = std::slice::from_raw_parts(borrow(y, "y")?, ny);
        let alt = if greater { Alternative::Greater } else { Alternative::Less };
        let t = core(evalkit::mann_whitney_u(x, y, alt))?;
        *out_ptr(u, "u")? = t.u;
        *out_ptr(p, "p")? = t.p;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_codec_load(path: *const c_char, out: *mut *mut SkgCodec) -> SkgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(SkgCodec(core(Codec::load(path_arg(path)?))?)));
        Ok(())
    })
}

/// Latent shape `(channels, height, width)` of a codec.
///
/// # Safety
/// `codec` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_codec_latent_dims(
    codec: *const SkgCodec,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> SkgStatus {
    guard(|| {
        let (c, h, w) = borrow(codec, "codec")?.0.latent_dims();
        *out_ptr(channels, "channels")? = c;
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        Ok(())
    })
}

/// Encodes and decodes `image`.
///
/// # Safety
/// `codec` and `image` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skg_codec_roundtrip(
    codec: *const SkgCodec,
    image: *const SkgImage,
    out: *mut *mut SkgImage,
) -> SkgStatus {
    guard(|| {
        let codec = &borrow(codec, "codec")?.0;
        let img = &borrow(image, "image")?.0;
        let out = out_ptr(out, "out")?;
        let z = core(codec.encode(img))?;
        *out = Box::into_raw(Box::new(SkgImage(core(codec.decode(&z))?)));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn skg_codec_free(codec: *mut SkgCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}
