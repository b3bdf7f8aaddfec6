//! C ABI over the petdiff library.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`PdStatus`]; on failure `pd_last_error` describes the cause for the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use petdiff::metrics::nrmse_volumes;
use petdiff::networks::Checkpoint;
use petdiff::pipeline::{denoise_volume, infer_volume, quantify, InferenceConfig, PhcMode};
use petdiff::volume::{read_labels, read_suv, write_labels, write_volume, ClassRoster, Geometry, LabelVolume, Volume3D};
use petdiff::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    PdOk = 0,
    /// A required pointer argument was null or a string was not UTF-8.
    PdErrArgument = 1,
    PdErrConfig = 2,
    PdErrData = 3,
    PdErrNumeric = 4,
    PdErrIo = 5,
    /// The library panicked; the handle arguments should not be reused.
    PdErrInternal = 6,
}

/// SUV volume.
pub struct PdVolume(Volume3D);

/// Label volume.
pub struct PdLabels(LabelVolume);

/// Trained model loaded from a checkpoint.
pub struct PdModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Io { .. } => PdStatus::PdErrIo,
        _ => match e.exit_code() {
            2 => PdStatus::PdErrConfig,
            4 => PdStatus::PdErrNumeric,
            _ => PdStatus::PdErrData,
        },
    }
}

enum Failure {
    Argument(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PdStatus::PdOk
        }
        Ok(Err(Failure::Argument(m))) => {
            set_error(m.to_string());
            PdStatus::PdErrArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            PdStatus::PdErrInternal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Argument("null path"));
    }
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure::Argument("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or(Failure::Argument("null handle"))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    unsafe { p.as_mut() }.ok_or(Failure::Argument("null output pointer"))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Builds a volume from `dims[0]·dims[1]·dims[2]` values, x fastest.
///
/// # Safety
/// `dims` and `voxel_mm` point to three values each, `data` to `len`
/// floats, `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_new(
    dims: *const usize,
    voxel_mm: *const f64,
    data: *const f32,
    len: usize,
    out: *mut *mut PdVolume,
) -> PdStatus {
    guard(|| {
        if dims.is_null() || voxel_mm.is_null() || (data.is_null() && len > 0) {
            return Err(Failure::Argument("null argument"));
        }
        let out = unsafe { out_ptr(out) }?;
        let d = unsafe { std::slice::from_raw_parts(dims, 3) };
        let v = unsafe { std::slice::from_raw_parts(voxel_mm, 3) };
        let values = if len == 0 { Vec::new() } else { unsafe { std::slice::from_raw_parts(data, len) }.to_vec() };
        let g = Geometry::new([d[0], d[1], d[2]], [v[0], v[1], v[2]])?;
        *out = boxed(PdVolume(Volume3D::new(g, values)?));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_read(path: *const c_char, out: *mut *mut PdVolume) -> PdStatus {
    guard(|| {
        let p = unsafe { path_arg(path) }?;
        let out = unsafe { out_ptr(out) }?;
        *out = boxed(PdVolume(read_suv(p)?));
        Ok(())
    })
}

/// # Safety
/// `volume` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_write(volume: *const PdVolume, path: *const c_char) -> PdStatus {
    guard(|| {
        let v = unsafe { handle(volume) }?;
        write_volume(&v.0, unsafe { path_arg(path) }?)?;
        Ok(())
    })
}

/// Writes `[nx, ny, nz]` into `dims`.
///
/// # Safety
/// `volume` is a live handle; `dims` has room for three values.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_dims(volume: *const PdVolume, dims: *mut usize) -> PdStatus {
    guard(|| {
        let v = unsafe { handle(volume) }?;
        if dims.is_null() {
            return Err(Failure::Argument("null output pointer"));
        }
        unsafe { std::slice::from_raw_parts_mut(dims, 3) }.copy_from_slice(&v.0.dims());
        Ok(())
    })
}

/// Copies the voxel values; `len` must equal the voxel count.
///
/// # Safety
/// `volume` is a live handle; `buf` has room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_copy_data(volume: *const PdVolume, buf: *mut f32, len: usize) -> PdStatus {
    guard(|| {
        let v = unsafe { handle(volume) }?;
        if buf.is_null() {
            return Err(Failure::Argument("null output pointer"));
        }
        if len != v.0.data().len() {
            return Err(Failure::Lib(Error::Geometry(format!("buffer holds {len} values, volume has {}", v.0.data().len()))));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(v.0.data());
        Ok(())
    })
}

/// # Safety
/// `volume` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pd_volume_free(volume: *mut PdVolume) {
    if !volume.is_null() {
        drop(unsafe { Box::from_raw(volume) });
    }
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_labels_read(path: *const c_char, out: *mut *mut PdLabels) -> PdStatus {
    guard(|| {
        let p = unsafe { path_arg(path) }?;
        let out = unsafe { out_ptr(out) }?;
        *out = boxed(PdLabels(read_labels(p)?));
        Ok(())
    })
}

/// # Safety
/// `labels` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_labels_write(labels: *const PdLabels, path: *const c_char) -> PdStatus {
    guard(|| {
        let l = unsafe { handle(labels) }?;
        write_labels(&l.0, unsafe { path_arg(path) }?)?;
        Ok(())
    })
}

/// Copies the class indices; `len` must equal the voxel count.
///
/// # Safety
/// `labels` is a live handle; `buf` has room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pd_labels_copy_data(labels: *const PdLabels, buf: *mut u8, len: usize) -> PdStatus {
    guard(|| {
        let l = unsafe { handle(labels) }?;
        if buf.is_null() {
            return Err(Failure::Argument("null output pointer"));
        }
        if len != l.0.data().len() {
            return Err(Failure::Lib(Error::Geometry(format!("buffer holds {len} values, labels have {}", l.0.data().len()))));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(l.0.data());
        Ok(())
    })
}

/// # Safety
/// `labels` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pd_labels_free(labels: *mut PdLabels) {
    if !labels.is_null() {
        drop(unsafe { Box::from_raw(labels) });
    }
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_model_load(path: *const c_char, out: *mut *mut PdModel) -> PdStatus {
    guard(|| {
        let p = unsafe { path_arg(path) }?;
        let out = unsafe { out_ptr(out) }?;
        *out = boxed(PdModel(Checkpoint::load(p)?));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pd_model_free(model: *mut PdModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

unsafe fn inference_config(patch: *const usize, stride: *const usize, one_step: bool) -> Result<InferenceConfig, Failure> {
    if patch.is_null() || stride.is_null() {
        return Err(Failure::Argument("null patch or stride"));
    }
    let p = unsafe { std::slice::from_raw_parts(patch, 3) };
    let s = unsafe { std::slice::from_raw_parts(stride, 3) };
    Ok(InferenceConfig {
        patch: [p[0], p[1], p[2]],
        stride: [s[0], s[1], s[2]],
        phc_mode: if one_step { PhcMode::OneStep } else { PhcMode::Chain },
        ..InferenceConfig::default()
    })
}

/// Denoises a low-count volume patch by patch (`[x, y, z]` sizes).
/// `one_step` selects the single-estimate path instead of the full chain.
///
/// # Safety
/// Handles are live; `patch` and `stride` point to three values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_denoise(
    model: *const PdModel,
    low_count: *const PdVolume,
    patch: *const usize,
    stride: *const usize,
    one_step: bool,
    seed: u64,
    out: *mut *mut PdVolume,
) -> PdStatus {
    guard(|| {
        let m = unsafe { handle(model) }?;
        let lc = unsafe { handle(low_count) }?;
        let cfg = unsafe { inference_config(patch, stride, one_step) }?;
        let out = unsafe { out_ptr(out) }?;
        *out = boxed(PdVolume(denoise_volume(&lc.0, &m.0, &cfg, seed)?));
        Ok(())
    })
}

/// Full inference: revised full-range image and fused labels.
///
/// # Safety
/// Handles are live; `patch` and `stride` point to three values; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn pd_segment(
    model: *const PdModel,
    low_count: *const PdVolume,
    patch: *const usize,
    stride: *const usize,
    one_step: bool,
    seed: u64,
    revised_out: *mut *mut PdVolume,
    labels_out: *mut *mut PdLabels,
) -> PdStatus {
    guard(|| {
        let m = unsafe { handle(model) }?;
        let lc = unsafe { handle(low_count) }?;
        let cfg = unsafe { inference_config(patch, stride, one_step) }?;
        let rev = unsafe { out_ptr(revised_out) }?;
        let lab = unsafe { out_ptr(labels_out) }?;
        let o = infer_volume(&lc.0, &m.0, &cfg, seed)?;
        *rev = boxed(PdVolume(o.p_hcr));
        *lab = boxed(PdLabels(o.seg.labels));
        Ok(())
    })
}

/// MTV in mL and TLG of the lesion class (label 1).
///
/// # Safety
/// Handles are live; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn pd_quantify(image: *const PdVolume, labels: *const PdLabels, mtv_ml: *mut f64, tlg: *mut f64) -> PdStatus {
    guard(|| {
        let img = unsafe { handle(image) }?;
        let lab = unsafe { handle(labels) }?;
        let mtv_ml = unsafe { out_ptr(mtv_ml) }?;
        let tlg = unsafe { out_ptr(tlg) }?;
        let roster = ClassRoster::with_organs(lab.0.num_classes().saturating_sub(2))?;
        let r = quantify(&img.0, &lab.0, &roster)?;
        *mtv_ml = r.mtv_ml;
        *tlg = r.tlg;
        Ok(())
    })
}

/// Full quantification report as JSON; release it with `pd_string_free`.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_quantify_json(image: *const PdVolume, labels: *const PdLabels, out: *mut *mut c_char) -> PdStatus {
    guard(|| {
        let img = unsafe { handle(image) }?;
        let lab = unsafe { handle(labels) }?;
        let out = unsafe { out_ptr(out) }?;
        let roster = ClassRoster::with_organs(lab.0.num_classes().saturating_sub(2))?;
        let json = quantify(&img.0, &lab.0, &roster)?.to_json();
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Whole-volume NRMSE of `pred` against `reference`.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_nrmse(pred: *const PdVolume, reference: *const PdVolume, out: *mut f64) -> PdStatus {
    guard(|| {
        let p = unsafe { handle(pred) }?;
        let r = unsafe { handle(reference) }?;
        let out = unsafe { out_ptr(out) }?;
        *out = nrmse_volumes(&p.0, &r.0)?;
        Ok(())
    })
}
