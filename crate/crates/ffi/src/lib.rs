//! C ABI for the meter streaming anomaly detector.
//!
//! Everything crosses the boundary through opaque handles and integer status
//! codes. The typical flow:
//!
//! 1. `meter_config_new`, `meter_config_set("ous.delta_l", "64")`, …
//! 2. `meter_train_csv` (or `meter_model_load`) → model handle
//! 3. `meter_session_new` → streaming session
//! 4. `meter_session_step` per instance, reading a `MeterDecision`
//! 5. `meter_session_free`, `meter_model_free`, `meter_config_free`
//!
//! Status codes are `METER_OK` (0) or negative; `meter_last_error_message`
//! returns a thread-local description of the most recent failure.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::path::Path;

use meter::config::MeterConfig;
use meter::data::{load_csv, split_history, standardize, Instance, Transform};
use meter::engine::{train, StreamSession, UpdateMode};
use meter::error::MeterError;
use meter::updater::Snapshot;

pub const METER_OK: c_int = 0;
pub const METER_ERR_NULL_ARGUMENT: c_int = -1;
pub const METER_ERR_INVALID_UTF8: c_int = -2;
pub const METER_ERR_CONFIG: c_int = -3;
pub const METER_ERR_DATA: c_int = -4;
pub const METER_ERR_SHAPE: c_int = -5;
pub const METER_ERR_RUNTIME: c_int = -6;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn code_for(err: &MeterError) -> c_int {
    match err {
        MeterError::Config(_) => METER_ERR_CONFIG,
        MeterError::Data(_) | MeterError::Parse { .. } | MeterError::Io(_) => METER_ERR_DATA,
        MeterError::Shape { .. } => METER_ERR_SHAPE,
        MeterError::Stream { source, .. } => code_for(source),
        _ => METER_ERR_RUNTIME,
    }
}

fn fail(err: MeterError) -> c_int {
    let code = code_for(&err);
    set_error(err.to_string());
    code
}

/// Message describing the most recent error on this thread, or NULL when no
/// error has occurred. The pointer stays valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn meter_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn meter_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Opaque run configuration.
pub struct MeterConfigHandle {
    inner: MeterConfig,
}

/// Opaque trained model bundle: snapshot plus input standardization.
pub struct MeterModelHandle {
    snapshot: Snapshot,
    transform: Transform,
}

/// Opaque streaming session.
pub struct MeterSessionHandle {
    session: StreamSession,
    transform: Transform,
    feature_dim: usize,
}

/// One scored stream instance.
#[repr(C)]
pub struct MeterDecision {
    /// Step index within this session.
    pub t: u64,
    /// Mean squared reconstruction error used as the anomaly score.
    pub score: f64,
    /// Concept uncertainty of the instance.
    pub uncertainty: f64,
    /// 1 when the dynamic (shift-adapted) detector produced the score.
    pub dynamic_route: u8,
    /// 1 when this step launched an offline update.
    pub update_fired: u8,
    /// Snapshot version the step was scored against.
    pub version: u64,
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        set_error("null string argument".into());
        return Err(METER_ERR_NULL_ARGUMENT);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8".into());
        METER_ERR_INVALID_UTF8
    })
}

/// Fresh configuration with the library defaults.
#[no_mangle]
pub extern "C" fn meter_config_new() -> *mut MeterConfigHandle {
    Box::into_raw(Box::new(MeterConfigHandle {
        inner: MeterConfig::default(),
    }))
}

/// Applies one dotted-key assignment, e.g. ("iec.mu_p", "0.2").
///
/// # Safety
/// `cfg` must be a live handle from `meter_config_new`; `key` and `value`
/// must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn meter_config_set(
    cfg: *mut MeterConfigHandle,
    key: *const c_char,
    value: *const c_char,
) -> c_int {
    let Some(cfg) = (unsafe { cfg.as_mut() }) else {
        set_error("null config handle".into());
        return METER_ERR_NULL_ARGUMENT;
    };
    let key = match unsafe { str_arg(key) } {
        Ok(s) => s,
        Err(code) => return code,
    };
    let value = match unsafe { str_arg(value) } {
        Ok(s) => s,
        Err(code) => return code,
    };
    match cfg.inner.set(key, value) {
        Ok(()) => METER_OK,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `cfg` must be a handle from `meter_config_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn meter_config_free(cfg: *mut MeterConfigHandle) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

fn train_bundle(instances: &[Instance], cfg: &MeterConfig) -> Result<MeterModelHandle, MeterError> {
    if instances.is_empty() {
        return Err(MeterError::Data("input stream is empty".into()));
    }
    let (history, _) = split_history(instances, cfg.h_r)?;
    let (history_std, _, transform) = standardize(history, &[])?;
    let snapshot = train(&history_std, cfg)?;
    Ok(MeterModelHandle {
        snapshot,
        transform,
    })
}

/// Trains on the leading `data.h_r` fraction of a CSV stream and returns the
/// model bundle, or NULL on failure.
///
/// # Safety
/// `cfg` must be a live config handle; `csv_path` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn meter_train_csv(
    cfg: *const MeterConfigHandle,
    csv_path: *const c_char,
) -> *mut MeterModelHandle {
    let Some(cfg) = (unsafe { cfg.as_ref() }) else {
        set_error("null config handle".into());
        return std::ptr::null_mut();
    };
    let path = match unsafe { str_arg(csv_path) } {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    let result = load_csv(Path::new(path)).and_then(|rows| train_bundle(&rows, &cfg.inner));
    match result {
        Ok(model) => Box::into_raw(Box::new(model)),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// Trains on a dense row-major feature buffer of `n_rows × n_cols`.
///
/// # Safety
/// `cfg` must be a live config handle; `features` must point to at least
/// `n_rows * n_cols` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn meter_train_buffer(
    cfg: *const MeterConfigHandle,
    features: *const f64,
    n_rows: usize,
    n_cols: usize,
) -> *mut MeterModelHandle {
    let Some(cfg) = (unsafe { cfg.as_ref() }) else {
        set_error("null config handle".into());
        return std::ptr::null_mut();
    };
    if features.is_null() || n_rows == 0 || n_cols == 0 {
        set_error("empty feature buffer".into());
        return std::ptr::null_mut();
    }
    let flat = unsafe { std::slice::from_raw_parts(features, n_rows * n_cols) };
    let instances: Vec<Instance> = flat
        .chunks(n_cols)
        .enumerate()
        .map(|(t, row)| Instance::new(row.to_vec(), None, t))
        .collect();
    match train_bundle(&instances, &cfg.inner) {
        Ok(model) => Box::into_raw(Box::new(model)),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// Loads a model bundle from a train output directory (snapshot.json plus
/// transform.json). Returns NULL on failure.
///
/// # Safety
/// `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn meter_model_load(dir: *const c_char) -> *mut MeterModelHandle {
    let path = match unsafe { str_arg(dir) } {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    let dir = Path::new(path);
    let load = || -> Result<MeterModelHandle, MeterError> {
        let snapshot = Snapshot::load(&dir.join("snapshot.json"))?;
        let text = std::fs::read_to_string(dir.join("transform.json"))?;
        let transform: Transform = serde_json::from_str(&text)?;
        Ok(MeterModelHandle {
            snapshot,
            transform,
        })
    };
    match load() {
        Ok(m) => Box::into_raw(Box::new(m)),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// Writes snapshot.json and transform.json into a directory.
///
/// # Safety
/// `model` must be a live model handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn meter_model_save(
    model: *const MeterModelHandle,
    dir: *const c_char,
) -> c_int {
    let Some(model) = (unsafe { model.as_ref() }) else {
        set_error("null model handle".into());
        return METER_ERR_NULL_ARGUMENT;
    };
    let path = match unsafe { str_arg(dir) } {
        Ok(s) => s,
        Err(code) => return code,
    };
    let dir = Path::new(path);
    let save = || -> Result<(), MeterError> {
        std::fs::create_dir_all(dir)?;
        model.snapshot.save(&dir.join("snapshot.json"))?;
        let mut bytes = serde_json::to_vec_pretty(&model.transform)?;
        bytes.push(b'\n');
        std::fs::write(dir.join("transform.json"), bytes)?;
        Ok(())
    };
    match save() {
        Ok(()) => METER_OK,
        Err(e) => fail(e),
    }
}

/// Input width the model expects (before standardization).
///
/// # Safety
/// `model` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn meter_model_feature_dim(model: *const MeterModelHandle) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.snapshot.detector.feature_dim())
}

/// # Safety
/// `model` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn meter_model_free(model: *mut MeterModelHandle) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Opens a streaming session over the model. With `async_updates` nonzero,
/// offline updates run on a background thread while scoring continues on the
/// previous snapshot version.
///
/// # Safety
/// `model` and `cfg` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn meter_session_new(
    model: *const MeterModelHandle,
    cfg: *const MeterConfigHandle,
    async_updates: c_int,
) -> *mut MeterSessionHandle {
    let Some(model) = (unsafe { model.as_ref() }) else {
        set_error("null model handle".into());
        return std::ptr::null_mut();
    };
    let Some(cfg) = (unsafe { cfg.as_ref() }) else {
        set_error("null config handle".into());
        return std::ptr::null_mut();
    };
    let mode = if async_updates != 0 {
        UpdateMode::Asynchronous
    } else {
        UpdateMode::Synchronous
    };
    match StreamSession::new(model.snapshot.clone(), cfg.inner.clone(), mode) {
        Ok(session) => Box::into_raw(Box::new(MeterSessionHandle {
            feature_dim: model.snapshot.detector.feature_dim(),
            transform: model.transform.clone(),
            session,
        })),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// Scores one raw (unstandardized) instance and fills `out`.
///
/// # Safety
/// `session` must be a live session handle, `features` must point to
/// `n_features` readable doubles, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn meter_session_step(
    session: *mut MeterSessionHandle,
    features: *const f64,
    n_features: usize,
    out: *mut MeterDecision,
) -> c_int {
    let Some(handle) = (unsafe { session.as_mut() }) else {
        set_error("null session handle".into());
        return METER_ERR_NULL_ARGUMENT;
    };
    if features.is_null() || out.is_null() {
        set_error("null buffer argument".into());
        return METER_ERR_NULL_ARGUMENT;
    }
    if n_features != handle.feature_dim {
        set_error(format!(
            "feature dim mismatch: model expects {}, got {n_features}",
            handle.feature_dim
        ));
        return METER_ERR_SHAPE;
    }
    let raw = unsafe { std::slice::from_raw_parts(features, n_features) };
    let x = handle.transform.apply(raw);
    match handle.session.step(&x) {
        Ok(decision) => {
            unsafe {
                *out = MeterDecision {
                    t: decision.t as u64,
                    score: decision.score.value,
                    uncertainty: decision.uncertainty,
                    dynamic_route: u8::from(matches!(
                        decision.route,
                        meter::autoencoder::ScoreSource::Dynamic
                    )),
                    update_fired: u8::from(decision.update_fired),
                    version: decision.version,
                };
            }
            METER_OK
        }
        Err(e) => fail(e),
    }
}

/// Latest published snapshot version visible to the session.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn meter_session_version(session: *const MeterSessionHandle) -> u64 {
    unsafe { session.as_ref() }.map_or(0, |h| h.session.snapshot().version)
}

/// Waits for any in-flight update and releases the session.
///
/// # Safety
/// `session` must be a handle from `meter_session_new`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn meter_session_free(session: *mut MeterSessionHandle) {
    if !session.is_null() {
        let handle = unsafe { Box::from_raw(session) };
        let _ = handle.session.finish();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn write_stream_csv(path: &Path) {
        use meter::data::{write_csv, DriftIn, DriftScript, Segment};
        let script = DriftScript {
            dim: 5,
            segments: vec![Segment {
                generator: 0,
                len: 800,
                drift: DriftIn::Abrupt,
                anomaly_rate: 0.05,
            }],
            concept_sep: 2.0,
            anomaly_offset: 6.0,
            component_spread: 2.0,
            noise: 0.5,
            noise_growth: 0.0,
            latent_rank: 0,
            drift_rank: 0,
        };
        let stream = meter::data::generate_drift_stream(&script, 3).unwrap();
        write_csv(path, &stream).unwrap();
    }

    #[test]
    fn full_ffi_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("stream.csv");
        write_stream_csv(&csv);

        let cfg = meter_config_new();
        unsafe {
            assert_eq!(
                meter_config_set(cfg, c("train.epochs").as_ptr(), c("40").as_ptr()),
                METER_OK
            );
            assert_eq!(
                meter_config_set(cfg, c("engine.use_ous").as_ptr(), c("false").as_ptr()),
                METER_OK
            );
            // bad key surfaces a config error and a message
            assert_eq!(
                meter_config_set(cfg, c("nope").as_ptr(), c("1").as_ptr()),
                METER_ERR_CONFIG
            );
            assert!(!meter_last_error_message().is_null());

            let model = meter_train_csv(cfg, c(csv.to_str().unwrap()).as_ptr());
            assert!(!model.is_null());
            assert_eq!(meter_model_feature_dim(model), 5);

            // save + load round trip
            let out = dir.path().join("bundle");
            assert_eq!(
                meter_model_save(model, c(out.to_str().unwrap()).as_ptr()),
                METER_OK
            );
            let reloaded = meter_model_load(c(out.to_str().unwrap()).as_ptr());
            assert!(!reloaded.is_null());

            let session = meter_session_new(model, cfg, 0);
            assert!(!session.is_null());
            let mut out_decision = MeterDecision {
                t: 0,
                score: 0.0,
                uncertainty: 0.0,
                dynamic_route: 0,
                update_fired: 0,
                version: 0,
            };
            let x = [0.1f64, -0.2, 0.3, 0.4, -0.5];
            assert_eq!(
                meter_session_step(session, x.as_ptr(), x.len(), &mut out_decision),
                METER_OK
            );
            assert_eq!(out_decision.t, 0);
            assert!(out_decision.score >= 0.0);
            assert_eq!(out_decision.version, 1);

            // wrong width is a shape error
            assert_eq!(
                meter_session_step(session, x.as_ptr(), 3, &mut out_decision),
                METER_ERR_SHAPE
            );

            // sessions over the reloaded bundle score identically
            let session2 = meter_session_new(reloaded, cfg, 0);
            let mut d2 = MeterDecision {
                t: 0,
                score: 0.0,
                uncertainty: 0.0,
                dynamic_route: 0,
                update_fired: 0,
                version: 0,
            };
            assert_eq!(
                meter_session_step(session2, x.as_ptr(), x.len(), &mut d2),
                METER_OK
            );
            assert_eq!(d2.score.to_bits(), out_decision.score.to_bits());

            meter_session_free(session);
            meter_session_free(session2);
            meter_model_free(model);
            meter_model_free(reloaded);
            meter_config_free(cfg);
        }
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            assert_eq!(
                meter_config_set(std::ptr::null_mut(), c("a").as_ptr(), c("b").as_ptr()),
                METER_ERR_NULL_ARGUMENT
            );
            assert!(meter_train_csv(std::ptr::null(), c("x").as_ptr()).is_null());
            assert_eq!(
                meter_session_step(
                    std::ptr::null_mut(),
                    std::ptr::null(),
                    0,
                    std::ptr::null_mut()
                ),
                METER_ERR_NULL_ARGUMENT
            );
            // frees tolerate NULL
            meter_config_free(std::ptr::null_mut());
            meter_model_free(std::ptr::null_mut());
            meter_session_free(std::ptr::null_mut());
        }
        assert!(!meter_version().is_null());
    }
}
