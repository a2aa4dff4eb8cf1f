//! C interface to `fbnet`.
//!
//! Every fallible function returns an [`FbnetStatus`]; on failure the message
//! is available from [`fbnet_last_error`] on the same thread. Models are
//! opaque [`FbnetModel`] handles released with [`fbnet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fbnet::detection::{detection_map, DetectionConfig, MapMethod};
use fbnet::evaluation::{iou_from_counts, roc_auc, ConfusionCounts, Mask, RocPooling};
use fbnet::maps::ActivationMap;
use fbnet::models::checkpoint::load_checkpoint;
use fbnet::models::{infer, ModelParams, ModelVariant, IN_CHANNELS, PATCH};
use fbnet::{Error, Tensor};

/// Values per patch: bands × rows × columns.
pub const FBNET_PATCH_VALUES: usize = 1792;

const _: () = assert!(FBNET_PATCH_VALUES == IN_CHANNELS * PATCH * PATCH);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FbnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    Panic = 7,
}

/// A loaded or freshly initialized model.
pub struct FbnetModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> FbnetStatus {
    match e {
        Error::InvalidArgument(_) | Error::CheckFailed(_) => FbnetStatus::InvalidArgument,
        Error::Io { .. } => FbnetStatus::Io,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Size { .. }
        | Error::Format { .. }
        | Error::Variant { .. }
        | Error::Dtype { .. } => FbnetStatus::Format,
        Error::Shape { .. } => FbnetStatus::Shape,
        Error::NonFinite(_) => FbnetStatus::NonFinite,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FbnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FbnetStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            FbnetStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            FbnetStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a>(m: *const FbnetModel) -> Result<&'a FbnetModel, Fail> {
    m.as_ref().ok_or(Fail::Null("model"))
}

fn patches(values: &[f32], count: usize) -> Result<Vec<Tensor>, Fail> {
    (0..count)
        .map(|i| {
            let chunk = &values[i * FBNET_PATCH_VALUES..(i + 1) * FBNET_PATCH_VALUES];
            Ok(Tensor::new(vec![IN_CHANNELS, PATCH, PATCH], chunk.to_vec())?)
        })
        .collect()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn fbnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fbnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Randomly initialized model of `variant` (`inet`, `inet_gap`, `fbnet`,
/// `fbnet_nogap`).
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbnet_model_init(variant: *const c_char, seed: u64, out: *mut *mut FbnetModel) -> FbnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let v: ModelVariant = text(variant, "variant")?.parse()?;
        *out = Box::into_raw(Box::new(FbnetModel {
            params: ModelParams::init(v, seed),
        }));
        Ok(())
    })
}

/// Loads a checkpoint written by `fbnet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fbnet_model_load(path: *const c_char, out: *mut *mut FbnetModel) -> FbnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let p = PathBuf::from(text(path, "path")?);
        let (params, _) = load_checkpoint(p, None)?;
        *out = Box::into_raw(Box::new(FbnetModel { params }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fbnet_model_free(model: *mut FbnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the variant name into `buf` (NUL-terminated, truncated to
/// `len`); returns the full name length.
///
/// # Safety
/// `model` must be a live handle and `buf` hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fbnet_model_variant(model: *const FbnetModel, buf: *mut c_char, len: usize) -> usize {
    let Some(m) = model.as_ref() else { return 0 };
    let name = m.params.variant.to_string();
    if !buf.is_null() && len > 0 {
        let n = name.len().min(len - 1);
        std::ptr::copy_nonoverlapping(name.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
    }
    name.len()
}

/// P(positive) for `count` patches laid out band-major, each
/// `FBNET_PATCH_VALUES` floats.
///
/// # Safety
/// `values` must hold `count * FBNET_PATCH_VALUES` floats and `out` `count`.
#[no_mangle]
pub unsafe extern "C" fn fbnet_predict(
    model: *const FbnetModel,
    values: *const f32,
    count: usize,
    out: *mut f64,
) -> FbnetStatus {
    guard(|| {
        let m = handle(model)?;
        let vals = slice(values, count * FBNET_PATCH_VALUES, "values")?;
        let out = slice_mut(out, count, "out")?;
        if count == 0 {
            return Ok(());
        }
        for (o, inf) in out.iter_mut().zip(infer(&m.params, &patches(vals, count)?)?) {
            *o = inf.positive_probability();
        }
        Ok(())
    })
}

/// Normalized positive-class activation map of one patch, `resolution²`
/// floats in row-major order. `method` is `avg`, `cam`, `gradcam` or
/// `mpcnn-cam`.
///
/// # Safety
/// `values` must hold `FBNET_PATCH_VALUES` floats and `out`
/// `resolution * resolution`.
#[no_mangle]
pub unsafe extern "C" fn fbnet_activation_map(
    model: *const FbnetModel,
    values: *const f32,
    method: *const c_char,
    resolution: usize,
    out: *mut f32,
) -> FbnetStatus {
    guard(|| {
        let m = handle(model)?;
        let vals = slice(values, FBNET_PATCH_VALUES, "values")?;
        let method: MapMethod = text(method, "method")?.parse()?;
        let out = slice_mut(out, resolution * resolution, "out")?;
        let config = DetectionConfig {
            resolution,
            ..DetectionConfig::default()
        };
        let inf = infer(&m.params, &patches(vals, 1)?)?.remove(0);
        let d = detection_map(&m.params, &inf, method, &config)?;
        out.copy_from_slice(d.map.values());
        Ok(())
    })
}

/// Pixel ROC AUC of one `height × width` score map against a 0/1 mask.
///
/// # Safety
/// `scores` and `truth` must each hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn fbnet_roc_auc(
    scores: *const f32,
    truth: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> FbnetStatus {
    guard(|| {
        let n = height * width;
        let s = slice(scores, n, "scores")?;
        let t = slice(truth, n, "truth")?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let map = ActivationMap::new(height, width, s.to_vec())?;
        let mask = Mask::new(height, width, t.iter().map(|&b| b != 0).collect())?;
        *out = roc_auc(&[map], &[mask], RocPooling::Pooled)?.auc;
        Ok(())
    })
}

/// TP / (TP + FP + FN); 0 when the denominator is 0.
#[no_mangle]
pub extern "C" fn fbnet_iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    iou_from_counts(&ConfusionCounts { tp, fp, tn: 0, fn_ }).value
}
