//! C ABI over the simulated configuration service.
//!
//! Every entry point returns a [`ConfabStatus`]. On failure the message is
//! kept per thread and can be copied out with [`confab_last_error`]. Strings
//! cross the boundary as NUL-terminated UTF-8; output strings are copied into
//! caller-owned buffers, and `out_len` always receives the full length
//! (without the terminator) so the caller can retry with a larger buffer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use confab_core::commission::Commission;
use confab_core::model::{Constraint, DeviceState};
use confab_core::sim::{write_ndjson, RunFile, World};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Invalid = 4,
    NotFound = 5,
    BufferTooSmall = 6,
    /// The world stopped after a safety audit failed.
    Halted = 7,
    Panic = 99,
}

/// Opaque simulation handle.
pub struct ConfabWorld {
    world: World,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(ConfabStatus, String);

fn fail<T>(status: ConfabStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ConfabStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(Failure(ConfabStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => ConfabStatus::Ok,
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn text<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return fail(ConfabStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .or_else(|_| fail(ConfabStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a>(w: *mut ConfabWorld) -> Result<&'a mut ConfabWorld, Failure> {
    match w.as_mut() {
        Some(w) => Ok(w),
        None => fail(ConfabStatus::NullArgument, "world is null"),
    }
}

/// Copies `s` plus a terminator into `buf`, always reporting the length.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    if !out_len.is_null() {
        *out_len = s.len();
    }
    if buf.is_null() || cap < s.len() + 1 {
        return fail(
            ConfabStatus::BufferTooSmall,
            format!("need {} bytes, have {cap}", s.len() + 1),
        );
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn halted(w: &World) -> Result<(), Failure> {
    match w.halted() {
        Some(diag) => fail(ConfabStatus::Halted, diag),
        None => Ok(()),
    }
}

/// Builds a world from a run document. Fleet and component references must
/// be inline; paths are resolved against the current directory.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confab_world_from_json(json: *const c_char, out: *mut *mut ConfabWorld) -> ConfabStatus {
    guard(|| {
        if out.is_null() {
            return fail(ConfabStatus::NullArgument, "out is null");
        }
        let json = text(json, "json")?;
        let mut run: RunFile = serde_json::from_str(json).or_else(|e| fail(ConfabStatus::Parse, e.to_string()))?;
        run.resolve(std::path::Path::new("."))
            .or_else(|e| fail(ConfabStatus::Invalid, e.to_string()))?;
        let world = World::new(run).or_else(|e| fail(ConfabStatus::Invalid, e.to_string()))?;
        *out = Box::into_raw(Box::new(ConfabWorld { world }));
        Ok(())
    })
}

/// # Safety
/// `w` must come from [`confab_world_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn confab_world_free(w: *mut ConfabWorld) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Advances one tick; `out_events` receives the number of events emitted.
///
/// # Safety
/// `w` must be a live handle; `out_events` may be null.
#[no_mangle]
pub unsafe extern "C" fn confab_world_tick(w: *mut ConfabWorld, out_events: *mut usize) -> ConfabStatus {
    guard(|| {
        let w = handle(w)?;
        let n = w.world.tick().len();
        if !out_events.is_null() {
            *out_events = n;
        }
        halted(&w.world)
    })
}

/// Advances up to `ticks` ticks, stopping early if the world halts.
///
/// # Safety
/// `w` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn confab_world_run(w: *mut ConfabWorld, ticks: u64) -> ConfabStatus {
    guard(|| {
        let w = handle(w)?;
        w.world.run(ticks);
        halted(&w.world)
    })
}

/// # Safety
/// `w` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confab_world_now(w: *mut ConfabWorld, out: *mut u64) -> ConfabStatus {
    guard(|| {
        let w = handle(w)?;
        if out.is_null() {
            return fail(ConfabStatus::NullArgument, "out is null");
        }
        *out = w.world.now();
        Ok(())
    })
}

/// Queues a commission document for the next intake phase.
///
/// # Safety
/// `w` must be a live handle; `json` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn confab_world_submit(w: *mut ConfabWorld, json: *const c_char) -> ConfabStatus {
    guard(|| {
        let w = handle(w)?;
        let c: Commission =
            serde_json::from_str(text(json, "json")?).or_else(|e| fail(ConfabStatus::Parse, e.to_string()))?;
        w.world.submit(c);
        Ok(())
    })
}

/// Copies the whole event log as NDJSON.
///
/// # Safety
/// `w` must be a live handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn confab_world_event_log(
    w: *mut ConfabWorld,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> ConfabStatus {
    guard(|| {
        let w = handle(w)?;
        let mut bytes = Vec::new();
        write_ndjson(w.world.events(), &mut bytes).or_else(|e| fail(ConfabStatus::Invalid, e.to_string()))?;
        let log = String::from_utf8(bytes).expect("events serialize to UTF-8");
        copy_out(&log, buf, cap, out_len)
    })
}

/// Copies a commission's status name (`completed`, `denied`, ...).
///
/// # Safety
/// `w` must be a live handle; `id` NUL-terminated; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn confab_commission_status(
    w: *mut ConfabWorld,
    id: *const c_char,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> ConfabStatus {
    guard(|| {
        let w = handle(w)?;
        let id = text(id, "id")?;
        match w.world.book().get(id) {
            Some(r) => copy_out(r.status.name(), buf, cap, out_len),
            None => fail(ConfabStatus::NotFound, format!("commission {id}")),
        }
    })
}

/// Evaluates a constraint over a JSON map of device id to device state.
///
/// # Safety
/// Both strings must be NUL-terminated; `out_holds` must be writable.
#[no_mangle]
pub unsafe extern "C" fn confab_constraint_check(
    constraint: *const c_char,
    states_json: *const c_char,
    out_holds: *mut bool,
) -> ConfabStatus {
    guard(|| {
        if out_holds.is_null() {
            return fail(ConfabStatus::NullArgument, "out_holds is null");
        }
        let c = Constraint::parse(text(constraint, "constraint")?)
            .or_else(|e| fail(ConfabStatus::Parse, e.to_string()))?;
        let states: BTreeMap<String, DeviceState> = serde_json::from_str(text(states_json, "states_json")?)
            .or_else(|e| fail(ConfabStatus::Parse, e.to_string()))?;
        *out_holds = c.evaluate(&states).or_else(|e| fail(ConfabStatus::Invalid, e.to_string()))?;
        Ok(())
    })
}

/// Copies the message of the last failed call on this thread.
///
/// # Safety
/// `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn confab_last_error(buf: *mut c_char, cap: usize, out_len: *mut usize) -> ConfabStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(&msg, buf, cap, out_len) {
        Ok(()) => ConfabStatus::Ok,
        Err(Failure(status, _)) => status,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn confab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
