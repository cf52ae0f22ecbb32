//! C ABI over `sphere-attn`.
//!
//! Objects cross the boundary as opaque handles ([`SaCloud`], [`SaModel`])
//! created by `sa_*_new`/`_load`/`_generate` functions and released with the
//! matching `_free`. Every fallible function returns an [`SaStatus`]; on
//! failure, [`sa_last_error_message`] describes what went wrong on the
//! calling thread. Panics never unwind into C: they surface as
//! `SA_STATUS_PANIC`.
//!
//! The header `include/sphere_attn.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphere_attn::attention::{sphereformer_forward, SphereConfig, SphereWeights};
use sphere_attn::format::{load_cloud, load_weights, save_cloud, save_weights};
use sphere_attn::geometry::PointCloud;
use sphere_attn::numerics::DenseMatrix;
use sphere_attn::partition::{
    cubic_partition, partition_stats, radial_partition, CubicWindowConfig, RadialWindowConfig,
};
use sphere_attn::posenc::exp_split_index;
use sphere_attn::synth::{generate_scene, BeamSceneConfig};
use sphere_attn::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Config = 3,
    Index = 4,
    Numeric = 5,
    Format = 6,
    Size = 7,
    Io = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

/// Partition mode for [`sa_partition_stats_json`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaMode {
    Radial = 0,
    Cubic = 1,
}

/// A point cloud: positions plus per-point features.
pub struct SaCloud(PointCloud);

/// Attention weights (f32) together with window and encoding settings.
pub struct SaModel {
    weights: SphereWeights<f32>,
    config: SphereConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SaStatus {
    match err {
        Error::Shape(_) => SaStatus::Shape,
        Error::Config(_) => SaStatus::Config,
        Error::Index(_) => SaStatus::Index,
        Error::Numeric(_) => SaStatus::Numeric,
        Error::Format(_) => SaStatus::Format,
        Error::Size(_) => SaStatus::Size,
        Error::Io(_) => SaStatus::Io,
    }
}

/// Failure inside a call: a status plus its message.
struct Fail(SaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SaStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    unsafe { p.as_ref() }.ok_or_else(|| Fail(SaStatus::NullPointer, format!("{what} is NULL")))
}

fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail(SaStatus::NullPointer, "path is NULL".into()));
    }
    // SAFETY: non-null, and the caller promises a NUL-terminated string
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str().map(str::to_owned).map_err(|_| Fail(SaStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(SaStatus::NullPointer, "output pointer is NULL".into()));
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads an SPC1 file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_load(path: *const c_char, out: *mut *mut SaCloud) -> SaStatus {
    guard(|| {
        let path = path_arg(path)?;
        write_out(out, SaCloud(load_cloud(path)?))
    })
}

/// Writes a cloud as SPC1.
///
/// # Safety
/// `cloud` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_save(cloud: *const SaCloud, path: *const c_char) -> SaStatus {
    guard(|| {
        let cloud = non_null(cloud, "cloud")?;
        save_cloud(path_arg(path)?, &cloud.0)?;
        Ok(())
    })
}

/// Builds a cloud from caller buffers: `positions` holds `n × 3` and
/// `features` `n × feature_dim` floats, row-major. `features` may be NULL
/// when `feature_dim` is 0. The data is copied.
///
/// # Safety
/// The buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_new(
    positions: *const f32,
    features: *const f32,
    n: usize,
    feature_dim: usize,
    out: *mut *mut SaCloud,
) -> SaStatus {
    guard(|| {
        if n > 0 && positions.is_null() {
            return Err(Fail(SaStatus::NullPointer, "positions is NULL".into()));
        }
        let total =
            n.checked_mul(feature_dim).ok_or_else(|| Fail(SaStatus::Size, "n × feature_dim overflows".into()))?;
        if total > 0 && features.is_null() {
            return Err(Fail(SaStatus::NullPointer, "features is NULL".into()));
        }
        // SAFETY: checked non-null above; lengths are the caller's contract
        let pos = if n == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(positions, n * 3) } };
        let feat = if total == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(features, total) } };
        let positions = pos.chunks_exact(3).map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
        let features = DenseMatrix::from_vec(n, feature_dim, feat.iter().map(|&v| v as f64).collect())?;
        if !features.all_finite() || pos.iter().any(|v| !v.is_finite()) {
            return Err(Fail(SaStatus::Numeric, "input contains NaN or infinity".into()));
        }
        write_out(out, SaCloud(PointCloud::new(positions, features)?))
    })
}

/// Generates a synthetic beam scene (inclinations spread over 60°..100°).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_generate(
    beam_count: usize,
    azimuth_steps: usize,
    r_min: f64,
    r_max: f64,
    dropout_prob: f64,
    feature_dim: usize,
    seed: u64,
    out: *mut *mut SaCloud,
) -> SaStatus {
    guard(|| {
        let cfg =
            BeamSceneConfig { beam_count, azimuth_steps, r_min, r_max_scene: r_max, dropout_prob, feature_dim, seed };
        write_out(out, SaCloud(generate_scene(&cfg)?))
    })
}

/// Number of points, or 0 for NULL.
///
/// # Safety
/// `cloud` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_len(cloud: *const SaCloud) -> usize {
    unsafe { cloud.as_ref() }.map_or(0, |c| c.0.len())
}

/// Feature length per point, or 0 for NULL.
///
/// # Safety
/// `cloud` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_feature_dim(cloud: *const SaCloud) -> usize {
    unsafe { cloud.as_ref() }.map_or(0, |c| c.0.feature_dim())
}

/// Releases a cloud. NULL is ignored.
///
/// # Safety
/// `cloud` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sa_cloud_free(cloud: *mut SaCloud) {
    if !cloud.is_null() {
        // SAFETY: created by Box::into_raw in this library
        drop(unsafe { Box::from_raw(cloud) });
    }
}

fn model_from(weights: SphereWeights<f32>) -> Result<SaModel, Fail> {
    let config =
        SphereConfig::for_windows(RadialWindowConfig::default(), CubicWindowConfig::default(), weights.table_len());
    config.validate(&weights)?;
    Ok(SaModel { weights, config })
}

/// Reads SPW1 weights; windows start at the defaults (2°×2° up to 120 m,
/// 5 m cubes).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_load(path: *const c_char, out: *mut *mut SaModel) -> SaStatus {
    guard(|| {
        let weights = load_weights::<f32>(path_arg(path)?)?;
        write_out(out, model_from(weights)?)
    })
}

/// Seeded random weights. `heads` must be even.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_random(
    heads: usize,
    head_dim: usize,
    table_len: usize,
    seed: u64,
    out: *mut *mut SaModel,
) -> SaStatus {
    guard(|| {
        if heads == 0 || head_dim == 0 {
            return Err(Fail(SaStatus::Config, "heads and head_dim must be positive".into()));
        }
        let weights = SphereWeights::random(heads, head_dim, table_len, &mut ChaCha8Rng::seed_from_u64(seed));
        write_out(out, model_from(weights)?)
    })
}

/// Writes the model's weights as SPW1.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sa_model_save(model: *const SaModel, path: *const c_char) -> SaStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        save_weights(path_arg(path)?, &model.weights)?;
        Ok(())
    })
}

/// Replaces the window sizes; position-encoding bins are re-derived. The
/// model is left unchanged on error.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sa_model_set_windows(
    model: *mut SaModel,
    delta_theta: f64,
    delta_phi: f64,
    r_max: f64,
    cubic_side: f64,
) -> SaStatus {
    guard(|| {
        // SAFETY: NULL is rejected; otherwise a live, exclusively used handle
        let model = unsafe { model.as_mut() }.ok_or_else(|| Fail(SaStatus::NullPointer, "model is NULL".into()))?;
        let config = SphereConfig::for_windows(
            RadialWindowConfig { delta_theta, delta_phi, r_max },
            CubicWindowConfig::uniform(cubic_side),
            model.weights.table_len(),
        );
        config.validate(&model.weights)?;
        model.config = config;
        Ok(())
    })
}

/// Channel count `c = heads × head_dim`, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sa_model_channels(model: *const SaModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.weights.params.channels())
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sa_model_free(model: *mut SaModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in this library
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Runs the attention layer. `out` receives `len(cloud) × channels` floats,
/// row-major in input order; `out_len` must equal that product.
///
/// # Safety
/// Handles must be live and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sa_forward(
    model: *const SaModel,
    cloud: *const SaCloud,
    out: *mut f32,
    out_len: usize,
) -> SaStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let cloud = non_null(cloud, "cloud")?;
        let c = model.weights.params.channels();
        if cloud.0.feature_dim() != c {
            return Err(Fail(
                SaStatus::Config,
                format!("cloud has {} feature channels but the model expects {c}", cloud.0.feature_dim()),
            ));
        }
        let need = cloud.0.len() * c;
        if out_len != need {
            return Err(Fail(SaStatus::Shape, format!("output buffer holds {out_len} floats, need {need}")));
        }
        if need > 0 && out.is_null() {
            return Err(Fail(SaStatus::NullPointer, "output buffer is NULL".into()));
        }
        let z = sphereformer_forward(
            cloud.0.positions(),
            &cloud.0.features().cast::<f32>(),
            &model.config,
            &model.weights,
        )?;
        if need > 0 {
            // SAFETY: non-null with `out_len == need` floats per the contract
            unsafe { std::slice::from_raw_parts_mut(out, need) }.copy_from_slice(z.data());
        }
        Ok(())
    })
}

/// Partition statistics as a JSON string, using the model's windows.
/// Release the string with [`sa_string_free`].
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_partition_stats_json(
    model: *const SaModel,
    cloud: *const SaCloud,
    mode: SaMode,
    out_json: *mut *mut c_char,
) -> SaStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let cloud = non_null(cloud, "cloud")?;
        if out_json.is_null() {
            return Err(Fail(SaStatus::NullPointer, "output pointer is NULL".into()));
        }
        let pos = cloud.0.positions();
        let partition = match mode {
            SaMode::Radial => radial_partition(pos, model.config.origin, &model.config.radial),
            SaMode::Cubic => cubic_partition(pos, &model.config.cubic),
        };
        let json = serde_json::to_string(&partition_stats(&partition, pos))
            .map_err(|e| Fail(SaStatus::Format, e.to_string()))?;
        let c = CString::new(json).map_err(|e| Fail(SaStatus::Format, e.to_string()))?;
        // SAFETY: checked non-null above
        unsafe { *out_json = c.into_raw() };
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sa_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this library
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Exponentially split position index of a signed relative radius, or -1
/// when `table_len` is odd or below 4, or `a` is not positive.
#[no_mangle]
pub extern "C" fn sa_exp_split_index(r: f64, a: f64, table_len: usize) -> i64 {
    if table_len < 4 || !table_len.is_multiple_of(2) || !(a > 0.0 && a.is_finite()) {
        return -1;
    }
    exp_split_index(r, a, table_len) as i64
}
