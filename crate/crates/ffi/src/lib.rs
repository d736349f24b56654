//! C interface to the prioritization engine.
//!
//! Engines are opaque handles. Structured data crosses the boundary as
//! NUL-terminated JSON strings in the same shape as the history and stream
//! files. Every call returns a [`TriageStatus`]; on failure the message is
//! available from [`triage_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use triage_core::checkpoint::Checkpoint;
use triage_core::{Engine, EngineParams, HistoryDb, TickInput, TypeId};

/// Opaque engine handle.
pub struct TriageEngine {
    inner: Engine,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriageStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// A JSON argument did not parse.
    Parse = 3,
    /// The engine rejected the request, e.g. a tick out of order.
    Rejected = 4,
    /// The checkpoint is corrupt or does not match the history.
    Checkpoint = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(text).ok());
}

struct Failure(TriageStatus, String);

impl Failure {
    fn new(status: TriageStatus, message: impl ToString) -> Self {
        Self(status, message.to_string())
    }
}

/// Runs `body`, recording any failure and containing panics.
fn guarded(body: impl FnOnce() -> Result<(), Failure>) -> TriageStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            TriageStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside the engine");
            TriageStatus::Internal
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::new(TriageStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| Failure::new(TriageStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn engine_ref<'a>(engine: *const TriageEngine) -> Result<&'a TriageEngine, Failure> {
    engine
        .as_ref()
        .ok_or_else(|| Failure::new(TriageStatus::NullArgument, "engine is null"))
}

unsafe fn write_string(out: *mut *mut c_char, text: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(TriageStatus::NullArgument, "output pointer is null"));
    }
    let owned = CString::new(text).map_err(|e| Failure::new(TriageStatus::Internal, e))?;
    *out = owned.into_raw();
    Ok(())
}

/// Creates an engine with the given residual tolerance. New violation types
/// are registered on first sight.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_new(epsilon: f64, out: *mut *mut TriageEngine) -> TriageStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Failure::new(TriageStatus::NullArgument, "output pointer is null"));
        }
        let inner = Engine::new(EngineParams {
            epsilon,
            ..EngineParams::default()
        })
        .map_err(|e| Failure::new(TriageStatus::Rejected, e))?;
        *out = Box::into_raw(Box::new(TriageEngine { inner }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_free(engine: *mut TriageEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Ingests one tick given as JSON and returns the tick report as JSON.
/// Nothing changes on failure.
///
/// # Safety
/// `engine` must be a live handle, `tick_json` a NUL-terminated string and
/// `report_out` writable. The report must be released with
/// [`triage_string_free`].
#[no_mangle]
pub unsafe extern "C" fn triage_engine_ingest_tick(
    engine: *mut TriageEngine,
    tick_json: *const c_char,
    report_out: *mut *mut c_char,
) -> TriageStatus {
    guarded(|| {
        let text = read_str(tick_json, "tick_json")?;
        if report_out.is_null() {
            return Err(Failure::new(TriageStatus::NullArgument, "report_out is null"));
        }
        let handle = engine
            .as_mut()
            .ok_or_else(|| Failure::new(TriageStatus::NullArgument, "engine is null"))?;
        let input: TickInput = serde_json::from_str(text).map_err(|e| Failure::new(TriageStatus::Parse, e))?;
        let report = handle
            .inner
            .ingest_tick(input)
            .map_err(|e| Failure::new(TriageStatus::Rejected, e))?;
        write_string(report_out, serde_json::to_string(&report).expect("reports serialize"))
    })
}

/// Current ranking of the open events as a JSON array.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_ranking(engine: *const TriageEngine, out: *mut *mut c_char) -> TriageStatus {
    guarded(|| {
        let handle = engine_ref(engine)?;
        let (ranking, _) = handle
            .inner
            .current_ranking()
            .map_err(|e| Failure::new(TriageStatus::Rejected, e))?;
        write_string(out, serde_json::to_string(&ranking).expect("rankings serialize"))
    })
}

/// Linear term of the type's current model for `len` factor values.
///
/// # Safety
/// `factors` must point to `len` readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_predict(
    engine: *const TriageEngine,
    type_id: *const c_char,
    factors: *const f64,
    len: usize,
    out: *mut f64,
) -> TriageStatus {
    guarded(|| {
        let handle = engine_ref(engine)?;
        let type_id = TypeId::new(read_str(type_id, "type_id")?);
        if factors.is_null() || out.is_null() {
            return Err(Failure::new(TriageStatus::NullArgument, "factors or out is null"));
        }
        let values = std::slice::from_raw_parts(factors, len);
        *out = handle
            .inner
            .predict_linear(&type_id, values)
            .map_err(|e| Failure::new(TriageStatus::Rejected, e))?;
        Ok(())
    })
}

/// Tick the engine expects next.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_next_tick(engine: *const TriageEngine, out: *mut u64) -> TriageStatus {
    guarded(|| {
        let handle = engine_ref(engine)?;
        if out.is_null() {
            return Err(Failure::new(TriageStatus::NullArgument, "out is null"));
        }
        *out = handle.inner.next_tick();
        Ok(())
    })
}

/// The stored history, one JSON record per line.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_history(engine: *const TriageEngine, out: *mut *mut c_char) -> TriageStatus {
    guarded(|| {
        let handle = engine_ref(engine)?;
        let mut bytes = Vec::new();
        handle
            .inner
            .history()
            .write_jsonl(&mut bytes)
            .map_err(|e| Failure::new(TriageStatus::Internal, e))?;
        write_string(out, String::from_utf8(bytes).map_err(|e| Failure::new(TriageStatus::Internal, e))?)
    })
}

/// Sealed checkpoint of the models, flags and tick marker, as JSON.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_export_checkpoint(
    engine: *const TriageEngine,
    out: *mut *mut c_char,
) -> TriageStatus {
    guarded(|| {
        let handle = engine_ref(engine)?;
        write_string(out, Checkpoint::from_engine(&handle.inner).to_json())
    })
}

/// Rebuilds an engine from a checkpoint and the history it was taken with.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn triage_engine_import_checkpoint(
    checkpoint_json: *const c_char,
    history_jsonl: *const c_char,
    out: *mut *mut TriageEngine,
) -> TriageStatus {
    guarded(|| {
        let checkpoint_text = read_str(checkpoint_json, "checkpoint_json")?;
        let history_text = read_str(history_jsonl, "history_jsonl")?;
        if out.is_null() {
            return Err(Failure::new(TriageStatus::NullArgument, "output pointer is null"));
        }
        let checkpoint =
            Checkpoint::from_json(checkpoint_text).map_err(|e| Failure::new(TriageStatus::Checkpoint, e))?;
        let history = HistoryDb::read_jsonl(BufReader::new(history_text.as_bytes()))
            .map_err(|e| Failure::new(TriageStatus::Parse, e))?;
        let inner = checkpoint
            .restore(history, true)
            .map_err(|e| Failure::new(TriageStatus::Checkpoint, e))?;
        *out = Box::into_raw(Box::new(TriageEngine { inner }));
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn triage_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn triage_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
