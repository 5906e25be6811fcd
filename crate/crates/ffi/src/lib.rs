//! C interface to floro.
//!
//! Every function returns a [`FloroStatus`]; on failure the message is kept
//! per thread and can be copied out with [`floro_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Panics never cross the boundary; they surface as
//! [`FloroStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use floro::geoposition::{
    absolute_2d_sincos, chip_geo_embedding, normalize_mercator, patch_centroids, GeoTransform, MercatorBounds,
    PatchGrid,
};
use floro::masking::{batch_plans, MaskPlan};
use floro::modal_input::read_chip;
use floro::net::ModelConfig;
use floro::numerics::ParamStore;
use floro::probe::{extract_features, PeMode};
use floro::synthcorpus::sar_to_db;
use floro::trainer::load_checkpoint;
use floro::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FloroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Shape = 4,
    Contract = 5,
    Numeric = 6,
    Domain = 7,
    Format = 8,
    Io = 9,
    Internal = 10,
}

impl From<&Error> for FloroStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::Shape { .. } | Error::Index { .. } => FloroStatus::Shape,
            Error::Contract(_) => FloroStatus::Contract,
            Error::Numeric(_) => FloroStatus::Numeric,
            Error::Domain(_) => FloroStatus::Domain,
            Error::Format(_) => FloroStatus::Format,
            Error::Io { .. } => FloroStatus::Io,
            Error::Context { .. } => FloroStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(FloroStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(FloroStatus::from(&e), e.to_string())
    }
}

fn fail(status: FloroStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FloroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FloroStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            FloroStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(FloroStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` writable elements.
unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, name: &str) -> Result<&'a mut [T], Failure> {
    non_null(p, name)?;
    if len < need {
        return Err(fail(
            FloroStatus::BufferTooSmall,
            format!("{name} holds {len} elements, {need} needed"),
        ));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FloroStatus::InvalidArgument, format!("{name} is not utf-8")))?;
    Ok(Path::new(s))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the
/// length the full message needs including the terminator, so a call with
/// `len == 0` sizes the buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn floro_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn floro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear SAR backscatter to decibels, `10 log10(x)`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn floro_sar_to_db(linear: f64, out: *mut f64) -> FloroStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = sar_to_db(linear)?;
        Ok(())
    })
}

/// Normalizes `n` Web Mercator points, given as interleaved `x, y` pairs in
/// `coords`, into `[0, 1]` pairs written to `out` (`2 n` doubles).
///
/// # Safety
/// `coords` and `out` must each point to `2 n` doubles.
#[no_mangle]
pub unsafe extern "C" fn floro_normalize_mercator(coords: *const f64, n: usize, out: *mut f64, out_len: usize) -> FloroStatus {
    guard(|| {
        non_null(coords, "coords")?;
        let out = out_slice(out, out_len, 2 * n, "out")?;
        let pts: Vec<(f64, f64)> = slice::from_raw_parts(coords, 2 * n).chunks(2).map(|c| (c[0], c[1])).collect();
        let norm = normalize_mercator(&pts, &MercatorBounds::default())?;
        for (o, (x, y)) in out.chunks_mut(2).zip(norm) {
            o[0] = x;
            o[1] = y;
        }
        Ok(())
    })
}

/// # Safety
/// `gt` must point to six doubles in GDAL order.
unsafe fn geotransform(gt: *const f64) -> Result<GeoTransform, Failure> {
    non_null(gt, "geotransform")?;
    let c: [f64; 6] = slice::from_raw_parts(gt, 6).try_into().expect("six values");
    let gt = GeoTransform::from_gdal(c);
    gt.validate()?;
    Ok(gt)
}

/// Map coordinates of patch centres in row-major order, as interleaved
/// `x, y` pairs (`2 rows cols` doubles).
///
/// # Safety
/// `gt` must point to six doubles; `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn floro_patch_centroids(
    gt: *const f64,
    rows: usize,
    cols: usize,
    patch_size: usize,
    out: *mut f64,
    out_len: usize,
) -> FloroStatus {
    guard(|| {
        let gt = geotransform(gt)?;
        let grid = PatchGrid::new(rows, cols, patch_size)?;
        let out = out_slice(out, out_len, 2 * grid.len(), "out")?;
        for (o, (x, y)) in out.chunks_mut(2).zip(patch_centroids(&gt, &grid)?) {
            o[0] = x;
            o[1] = y;
        }
        Ok(())
    })
}

/// Geographic sin-cos embedding of every patch of a georeferenced chip,
/// `[rows cols, dim]` row-major.
///
/// # Safety
/// `gt` must point to six doubles; `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn floro_geo_embedding(
    gt: *const f64,
    rows: usize,
    cols: usize,
    patch_size: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> FloroStatus {
    guard(|| {
        let gt = geotransform(gt)?;
        let grid = PatchGrid::new(rows, cols, patch_size)?;
        let emb = chip_geo_embedding(Some(&gt), &grid, &MercatorBounds::default(), dim)?.expect("geotransform given");
        out_slice(out, out_len, emb.len(), "out")?.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Fixed 2D sin-cos embedding of patch grid positions, `[rows cols, dim]`.
///
/// # Safety
/// `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn floro_abs_embedding(rows: usize, cols: usize, dim: usize, out: *mut f64, out_len: usize) -> FloroStatus {
    guard(|| {
        let grid = PatchGrid::new(rows, cols, 1)?;
        let emb = absolute_2d_sincos(&grid, dim)?;
        out_slice(out, out_len, emb.len(), "out")?.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Frozen encoder loaded from a checkpoint.
pub struct FloroEncoder {
    model: ModelConfig,
    params: ParamStore,
}

/// Loads the encoder part of a checkpoint file. Full checkpoints are
/// accepted; their decoder and optimizer state are dropped.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to a writable
/// handle pointer.
#[no_mangle]
pub unsafe extern "C" fn floro_encoder_load(path: *const c_char, out: *mut *mut FloroEncoder) -> FloroStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let ck = load_checkpoint(path_arg(path, "path")?)?.encoder_export();
        *out = Box::into_raw(Box::new(FloroEncoder {
            model: ck.model,
            params: ck.params,
        }));
        Ok(())
    })
}

/// Length of feature vectors, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floro_encoder_feature_dim(enc: *const FloroEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.model.encoder_dim)
}

/// Patch size the encoder expects, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floro_encoder_patch_size(enc: *const FloroEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.model.patch_size)
}

/// Mean-pooled features of the chip stored in directory `chip_dir`.
/// With `use_geo` non-zero the geographic encoding is added when the chip
/// is georeferenced.
///
/// # Safety
/// `enc` must be a live handle, `chip_dir` a NUL-terminated string and
/// `out` must point to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn floro_encoder_extract(
    enc: *const FloroEncoder,
    chip_dir: *const c_char,
    use_geo: c_int,
    out: *mut f64,
    out_len: usize,
) -> FloroStatus {
    guard(|| {
        non_null(enc, "encoder")?;
        let enc = &*enc;
        let out = out_slice(out, out_len, enc.model.encoder_dim, "out")?;
        let (_, sample) = read_chip(path_arg(chip_dir, "chip_dir")?)?;
        let mode = if use_geo != 0 { PeMode::AbsPlusGeo } else { PeMode::AbsOnly };
        let f = extract_features(&[sample], &enc.params, &enc.model, mode)?;
        out.copy_from_slice(&f[0]);
        Ok(())
    })
}

/// Releases an encoder handle. Null is ignored.
///
/// # Safety
/// `enc` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn floro_encoder_free(enc: *mut FloroEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Token mask of one branch.
pub struct FloroMaskPlan {
    plan: MaskPlan,
}

/// Mask plan the trainer would draw for `branch` (0 optical, 1 auxiliary)
/// of micro-batch `batch` in `epoch`.
///
/// # Safety
/// `out` must point to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_new(
    len: usize,
    ratio: f64,
    seed: u64,
    epoch: usize,
    batch: usize,
    branch: c_int,
    out: *mut *mut FloroMaskPlan,
) -> FloroStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let idx = match branch {
            0 | 1 => branch as usize,
            b => return Err(fail(FloroStatus::InvalidArgument, format!("branch must be 0 or 1, got {b}"))),
        };
        let [optical, aux] = batch_plans(len, ratio, seed, epoch, batch)?;
        let plan = if idx == 0 { optical } else { aux };
        *out = Box::into_raw(Box::new(FloroMaskPlan { plan }));
        Ok(())
    })
}

/// Number of tokens, or 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_len(plan: *const FloroMaskPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.plan.len())
}

/// Number of visible tokens, or 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_visible_count(plan: *const FloroMaskPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.plan.visible_count())
}

/// Writes `len` flags, 1 for masked tokens and 0 for visible ones.
///
/// # Safety
/// `plan` must be a live handle; `out` must point to `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_masked(plan: *const FloroMaskPlan, out: *mut u8, out_len: usize) -> FloroStatus {
    guard(|| {
        non_null(plan, "plan")?;
        let p = &(*plan).plan;
        let out = out_slice(out, out_len, p.len(), "out")?;
        for (o, &m) in out.iter_mut().zip(&p.masked) {
            *o = u8::from(m);
        }
        Ok(())
    })
}

/// Writes the token permutation; its first `visible_count` entries are
/// the visible tokens.
///
/// # Safety
/// `plan` must be a live handle; `out` must point to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_shuffle(plan: *const FloroMaskPlan, out: *mut usize, out_len: usize) -> FloroStatus {
    guard(|| {
        non_null(plan, "plan")?;
        let p = &(*plan).plan;
        out_slice(out, out_len, p.len(), "out")?.copy_from_slice(&p.shuffle);
        Ok(())
    })
}

/// Writes the inverse of the shuffle permutation.
///
/// # Safety
/// `plan` must be a live handle; `out` must point to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_restore(plan: *const FloroMaskPlan, out: *mut usize, out_len: usize) -> FloroStatus {
    guard(|| {
        non_null(plan, "plan")?;
        let p = &(*plan).plan;
        out_slice(out, out_len, p.len(), "out")?.copy_from_slice(&p.restore);
        Ok(())
    })
}

/// Releases a mask plan handle. Null is ignored.
///
/// # Safety
/// `plan` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn floro_mask_plan_free(plan: *mut FloroMaskPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}
