//! C ABI over `clforge`.
//!
//! Every fallible function returns a [`ClforgeStatus`] and writes results through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`clforge_last_error`]. Trained runs are exposed through the opaque [`ClforgeState`]
//! handle, loaded from a `state.ckpt` checkpoint written by the CLI.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use clforge::adapters::{self, AllocationKind};
use clforge::tensor::Tensor;
use clforge::trainer::ContinualState;
use clforge::{consolidation, experiment, memory, metrics, Error};

/// Pixels in one image or mask (32 × 32).
pub const CLFORGE_IMAGE_LEN: usize = 1024;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClforgeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Divergence = 7,
    Utf8 = 8,
    Panic = 9,
    Internal = 10,
}

/// A trained continual-learning run. Only ever handled through a pointer.
pub struct ClforgeState {
    inner: ContinualState,
}

/// Outcome of an adapter allocation query.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClforgeAllocation {
    /// 1 when an existing adapter would be reused, 0 when a new one would be created.
    pub reuse: u8,
    /// The adapter that would be used (for a new adapter, the id it would receive).
    pub adapter: usize,
    /// Most similar previous task; only meaningful when `reuse` is 1.
    pub task: usize,
    /// Best cosine similarity to any previous prompt, 0 when there is none.
    pub similarity: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> ClforgeStatus {
    match err {
        Error::Io(_) => ClforgeStatus::Io,
        Error::Format(_) | Error::Json(_) => ClforgeStatus::Format,
        Error::Config(_) => ClforgeStatus::Config,
        Error::Divergence(_) => ClforgeStatus::Divergence,
        Error::InvalidArgument(_) | Error::InvalidSpec(_) | Error::Empty(_) | Error::Tensor(_) => ClforgeStatus::InvalidArgument,
        _ => ClforgeStatus::Internal,
    }
}

struct Failure(ClforgeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: ClforgeStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records any error or panic, and converts the outcome to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClforgeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClforgeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ClforgeStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    match p.as_mut() {
        Some(r) => Ok(r),
        None => fail(ClforgeStatus::NullPointer, format!("`{name}` is null")),
    }
}

unsafe fn state_ref<'a>(p: *const ClforgeState) -> Result<&'a ContinualState, Failure> {
    match p.as_ref() {
        Some(s) => Ok(&s.inner),
        None => fail(ClforgeStatus::NullPointer, "`state` is null"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(ClforgeStatus::NullPointer, format!("`{name}` is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(ClforgeStatus::Utf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return fail(ClforgeStatus::NullPointer, format!("`{name}` is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the most recent failure on this thread, or NULL after a success.
///
/// The pointer stays valid until the next `clforge_*` call on the same thread.
#[no_mangle]
pub extern "C" fn clforge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clforge_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a run checkpoint. On success `*out` owns a handle to release with
/// [`clforge_state_free`]; on failure `*out` is set to NULL.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_load(path: *const c_char, out: *mut *mut ClforgeState) -> ClforgeStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = experiment::load_state(Path::new(path))?;
        *out = Box::into_raw(Box::new(ClforgeState { inner }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `state` must come from [`clforge_state_load`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_free(state: *mut ClforgeState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Number of tasks trained so far.
///
/// # Safety
/// `state` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_num_tasks(state: *const ClforgeState, out: *mut usize) -> ClforgeStatus {
    guard(|| {
        *out_ref(out, "out")? = state_ref(state)?.t_current();
        Ok(())
    })
}

/// Number of adapters in the bank.
///
/// # Safety
/// `state` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_num_adapters(state: *const ClforgeState, out: *mut usize) -> ClforgeStatus {
    guard(|| {
        *out_ref(out, "out")? = state_ref(state)?.bank.adapters.len();
        Ok(())
    })
}

/// Adapter that serves `task`.
///
/// # Safety
/// `state` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_task_adapter(state: *const ClforgeState, task: usize, out: *mut usize) -> ClforgeStatus {
    guard(|| {
        let s = state_ref(state)?;
        let out = out_ref(out, "out")?;
        match s.bank.task_assignment.get(&task) {
            Some(&a) => *out = a,
            None => return fail(ClforgeStatus::OutOfRange, format!("task {task} has not been trained")),
        }
        Ok(())
    })
}

/// Foreground probabilities for a 32×32 image, using the prompt and adapter of `task`.
/// `image` and `out` hold [`CLFORGE_IMAGE_LEN`] row-major values each.
///
/// # Safety
/// `image` must be readable and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_predict(
    state: *const ClforgeState,
    task: usize,
    image: *const f64,
    out: *mut f64,
    len: usize,
) -> ClforgeStatus {
    guard(|| {
        let s = state_ref(state)?;
        if len != CLFORGE_IMAGE_LEN {
            return fail(ClforgeStatus::InvalidArgument, format!("expected {CLFORGE_IMAGE_LEN} pixels, got {len}"));
        }
        let pixels = slice_arg(image, len, "image")?;
        if out.is_null() {
            return fail(ClforgeStatus::NullPointer, "`out` is null");
        }
        let Some(record) = s.records.get(task) else {
            return fail(ClforgeStatus::OutOfRange, format!("task {task} has not been trained"));
        };
        let adapter = s.bank.adapters.get(&record.adapter);
        let image = Tensor::new(vec![32, 32], pixels.to_vec()).map_err(Error::from)?;
        let logits = s.model.forward(&image, &record.prompt, adapter)?;
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, &z) in dst.iter_mut().zip(logits.data()) {
            *d = 1.0 / (1.0 + (-z).exp());
        }
        Ok(())
    })
}

/// Test Dice of `task` after training stage `stage` (`stage >= task`).
///
/// # Safety
/// `state` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_result(state: *const ClforgeState, stage: usize, task: usize, out: *mut f64) -> ClforgeStatus {
    guard(|| {
        let s = state_ref(state)?;
        let out = out_ref(out, "out")?;
        match s.results.get(stage, task) {
            Some(v) => *out = v,
            None => return fail(ClforgeStatus::OutOfRange, format!("no result for stage {stage}, task {task}")),
        }
        Ok(())
    })
}

/// Average forgetting rate in percent over all tasks but the last.
///
/// # Safety
/// `state` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_forgetting(state: *const ClforgeState, out: *mut f64) -> ClforgeStatus {
    guard(|| {
        let s = state_ref(state)?;
        *out_ref(out, "out")? = metrics::forgetting_rate(&s.results)?.average;
        Ok(())
    })
}

/// Cosine similarity of two prompts under the run's text encoder.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_similarity(state: *const ClforgeState, a: *const c_char, b: *const c_char, out: *mut f64) -> ClforgeStatus {
    guard(|| {
        let s = state_ref(state)?;
        let (a, b) = (str_arg(a, "a")?, str_arg(b, "b")?);
        let out = out_ref(out, "out")?;
        *out = adapters::cosine_similarity(&s.model.embed_text(a)?, &s.model.embed_text(b)?)?;
        Ok(())
    })
}

/// Which adapter a new task with `prompt` would get at threshold `tau`. Nothing is modified.
///
/// # Safety
/// `prompt` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_state_allocate(
    state: *const ClforgeState,
    prompt: *const c_char,
    tau: f64,
    out: *mut ClforgeAllocation,
) -> ClforgeStatus {
    guard(|| {
        let s = state_ref(state)?;
        let prompt = str_arg(prompt, "prompt")?;
        let out = out_ref(out, "out")?;
        let decision = adapters::allocate(&s.model.embed_text(prompt)?, &s.bank, tau)?;
        let best = decision
            .all_similarities
            .values()
            .copied()
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        *out = match decision.kind {
            AllocationKind::Reuse { adapter, task, similarity } => ClforgeAllocation {
                reuse: 1,
                adapter,
                task,
                similarity,
            },
            AllocationKind::New { adapter } => ClforgeAllocation {
                reuse: 0,
                adapter,
                task: 0,
                similarity: best.unwrap_or(0.0),
            },
        };
        Ok(())
    })
}

/// Dice coefficient of two equal-length masks.
///
/// # Safety
/// `pred` and `gt` must be readable for `len` doubles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_dice(pred: *const f64, gt: *const f64, len: usize, out: *mut f64) -> ClforgeStatus {
    guard(|| {
        let (p, g) = (slice_arg(pred, len, "pred")?, slice_arg(gt, len, "gt")?);
        *out_ref(out, "out")? = metrics::dice(p, g)?;
        Ok(())
    })
}

/// Sampling weight of buffer `task` while training stage `t_current`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_replay_weight(task: usize, t_current: usize, fisher_avg: f64, boost_alpha: f64, out: *mut f64) -> ClforgeStatus {
    guard(|| {
        *out_ref(out, "out")? = memory::replay_weight(task, t_current, fisher_avg, boost_alpha)?;
        Ok(())
    })
}

/// Difficulty weight of a sample with `loss` given the task's maximum loss.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clforge_difficulty_weight(loss: f64, max_loss: f64, out: *mut f64) -> ClforgeStatus {
    guard(|| {
        *out_ref(out, "out")? = consolidation::difficulty_weight(loss, max_loss)?;
        Ok(())
    })
}
