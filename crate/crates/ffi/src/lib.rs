//! C ABI over the `imputer` crate.
//!
//! Conventions shared by every entry point:
//!
//! * Lattices are row-major `slots × symbols` arrays of natural-log
//!   probabilities, column 0 is the blank and columns `1..symbols` are tokens.
//! * Partial alignments use the id `symbols` (one past the last token) for a
//!   masked slot.
//! * Functions return an [`ImputerStatus`]; on failure the thread-local
//!   message from [`imputer_last_error`] describes what went wrong. Output
//!   pointers are only written on success.
//! * Panics never cross the boundary; they surface as `IMPUTER_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use imputer::decoder::{self, DecodeConfig, Strategy};
use imputer::dp::{self, LogProbLattice};
use imputer::model::{load_checkpoint, FeatureSeq, ModelParams};
use imputer::{Alignment, CheckpointError, Error, LabelSeq, PartialAlignment, Vocab};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    Io = 4,
    CheckpointCorrupt = 5,
    CheckpointVersion = 6,
    CheckpointShape = 7,
    Numeric = 8,
    /// The output buffer is too small; the required length has been written.
    BufferTooSmall = 9,
    Panic = 10,
}

/// Decoding strategy for [`imputer_model_decode`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputerStrategy {
    Plain = 0,
    AlternateSubblock = 1,
    RightmostLast = 2,
    Topk = 3,
}

fn strategy_from(raw: u32) -> FfiResult<Strategy> {
    Ok(match raw {
        0 => Strategy::Plain,
        1 => Strategy::AlternateSubblock,
        2 => Strategy::RightmostLast,
        3 => Strategy::Topk,
        _ => return Err(invalid(format!("unknown decode strategy {raw}"))),
    })
}

/// A loaded model. Opaque to C.
pub struct ImputerModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(ImputerStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Infeasible(_) => ImputerStatus::Infeasible,
            Error::Io { .. } => ImputerStatus::Io,
            Error::Numeric(_) => ImputerStatus::Numeric,
            Error::Checkpoint(CheckpointError::Corrupt(_)) => ImputerStatus::CheckpointCorrupt,
            Error::Checkpoint(CheckpointError::Version { .. }) => ImputerStatus::CheckpointVersion,
            Error::Checkpoint(CheckpointError::Shape(_)) => ImputerStatus::CheckpointShape,
            _ => ImputerStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ImputerStatus::InvalidArgument, msg.into())
}

type FfiResult<T = ()> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> ImputerStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(ImputerStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            set_last_error("");
            ImputerStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_last_error(&msg);
            status
        }
    }
}

/// Borrow `len` elements; a null pointer is only accepted when `len == 0`.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure(ImputerStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure(ImputerStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> FfiResult<&'a mut T> {
    ptr.as_mut()
        .ok_or_else(|| Failure(ImputerStatus::NullPointer, format!("{what} is null")))
}

fn vocab_for(symbols: usize) -> FfiResult<Vocab> {
    let n = symbols
        .checked_sub(1)
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| invalid("symbols must be at least 2"))?;
    Ok(Vocab::new(n)?)
}

unsafe fn lattice(logp: *const f64, slots: usize, symbols: usize) -> FfiResult<LogProbLattice> {
    let len = slots
        .checked_mul(symbols)
        .ok_or_else(|| invalid("lattice size overflows"))?;
    let values = slice(logp, len, "log_probs")?;
    Ok(LogProbLattice::new(slots, symbols, values.to_vec())?)
}

unsafe fn partial(ptr: *const u32, slots: usize, vocab: &Vocab) -> FfiResult<PartialAlignment> {
    Ok(PartialAlignment::from_ids(slice(ptr, slots, "partial")?, vocab)?)
}

unsafe fn alignment(ptr: *const u32, slots: usize, vocab: &Vocab) -> FfiResult<Alignment> {
    Ok(Alignment::new(slice(ptr, slots, "alignment")?.to_vec(), vocab)?)
}

unsafe fn labels(ptr: *const u32, len: usize, vocab: &Vocab) -> FfiResult<LabelSeq> {
    Ok(LabelSeq::new(slice(ptr, len, "labels")?.to_vec(), vocab)?)
}

/// Message describing the last failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn imputer_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imputer_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(
        concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes(),
    ) {
        Ok(v) => v,
        Err(_) => panic!("version contains NUL"),
    };
    VERSION.as_ptr()
}

/// log p(y | lattice) summed over every alignment of `labels`.
///
/// # Safety
/// `log_probs` must point to `slots * symbols` doubles, `labels` to
/// `num_labels` ids, and `out_logp` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn imputer_ctc_forward(
    log_probs: *const f64,
    slots: usize,
    symbols: usize,
    labels_ptr: *const u32,
    num_labels: usize,
    out_logp: *mut f64,
) -> ImputerStatus {
    guard(|| {
        let vocab = vocab_for(symbols)?;
        let l = lattice(log_probs, slots, symbols)?;
        let y = labels(labels_ptr, num_labels, &vocab)?;
        let value = dp::ctc_forward(&l, &y)?;
        *out(out_logp, "out_logp")? = value;
        Ok(())
    })
}

/// Most probable alignment of `labels`, `slots` ids written to `out_alignment`.
/// Ties prefer the blank.
///
/// # Safety
/// As [`imputer_ctc_forward`], with `out_alignment` writable for `slots` ids.
#[no_mangle]
pub unsafe extern "C" fn imputer_ctc_viterbi(
    log_probs: *const f64,
    slots: usize,
    symbols: usize,
    labels_ptr: *const u32,
    num_labels: usize,
    out_alignment: *mut u32,
) -> ImputerStatus {
    guard(|| {
        let vocab = vocab_for(symbols)?;
        let l = lattice(log_probs, slots, symbols)?;
        let y = labels(labels_ptr, num_labels, &vocab)?;
        let best = dp::ctc_viterbi(&l, &y)?;
        slice_mut(out_alignment, slots, "out_alignment")?.copy_from_slice(best.ids());
        Ok(())
    })
}

/// Marginal over alignments that collapse like `alignment` and agree with
/// `partial` on every unmasked slot.
///
/// # Safety
/// `log_probs` holds `slots * symbols` doubles; `partial` and `alignment`
/// hold `slots` ids each; `out_logp` is writable.
#[no_mangle]
pub unsafe extern "C" fn imputer_constrained_forward(
    log_probs: *const f64,
    slots: usize,
    symbols: usize,
    partial_ptr: *const u32,
    alignment_ptr: *const u32,
    out_logp: *mut f64,
) -> ImputerStatus {
    guard(|| {
        let vocab = vocab_for(symbols)?;
        let l = lattice(log_probs, slots, symbols)?;
        let p = partial(partial_ptr, slots, &vocab)?;
        let a = alignment(alignment_ptr, slots, &vocab)?;
        let value = dp::constrained_forward(&l, &p, &a)?;
        *out(out_logp, "out_logp")? = value;
        Ok(())
    })
}

/// Constrained marginal plus per-slot symbol posteriors, `slots * symbols`
/// doubles written to `out_posteriors`.
///
/// # Safety
/// As [`imputer_constrained_forward`], with `out_posteriors` writable for
/// `slots * symbols` doubles.
#[no_mangle]
pub unsafe extern "C" fn imputer_forward_backward(
    log_probs: *const f64,
    slots: usize,
    symbols: usize,
    partial_ptr: *const u32,
    alignment_ptr: *const u32,
    out_logp: *mut f64,
    out_posteriors: *mut f64,
) -> ImputerStatus {
    guard(|| {
        let vocab = vocab_for(symbols)?;
        let l = lattice(log_probs, slots, symbols)?;
        let p = partial(partial_ptr, slots, &vocab)?;
        let a = alignment(alignment_ptr, slots, &vocab)?;
        let (value, post) = dp::forward_backward(&l, &p, &a)?;
        let logp = out(out_logp, "out_logp")?;
        slice_mut(out_posteriors, slots * symbols, "out_posteriors")?
            .copy_from_slice(post.values());
        *logp = value;
        Ok(())
    })
}

/// Number of alignments compatible with `partial` that collapse like
/// `alignment`. Fails with `IMPUTER_STATUS_NUMERIC` if it does not fit in 64
/// bits.
///
/// # Safety
/// `partial` and `alignment` hold `slots` ids each; `out_count` is writable.
#[no_mangle]
pub unsafe extern "C" fn imputer_count_compatible(
    partial_ptr: *const u32,
    alignment_ptr: *const u32,
    slots: usize,
    symbols: usize,
    out_count: *mut u64,
) -> ImputerStatus {
    guard(|| {
        let vocab = vocab_for(symbols)?;
        let p = partial(partial_ptr, slots, &vocab)?;
        let a = alignment(alignment_ptr, slots, &vocab)?;
        let count = dp::count_compatible(&p, &a)?;
        let count = u64::try_from(count).map_err(|_| {
            Failure(ImputerStatus::Numeric, format!("count {count} overflows u64"))
        })?;
        *out(out_count, "out_count")? = count;
        Ok(())
    })
}

/// Load a checkpoint written by the `imputer` tool.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out_model` is writable. Release
/// the model with [`imputer_model_free`].
#[no_mangle]
pub unsafe extern "C" fn imputer_model_load(
    path: *const c_char,
    out_model: *mut *mut ImputerModel,
) -> ImputerStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure(ImputerStatus::NullPointer, "path is null".into()));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let slot = out(out_model, "out_model")?;
        let ckpt = load_checkpoint(Path::new(path))?;
        *slot = Box::into_raw(Box::new(ImputerModel {
            params: ckpt.params,
        }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`imputer_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imputer_model_free(model: *mut ImputerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const ImputerModel) -> FfiResult<&'a ImputerModel> {
    model
        .as_ref()
        .ok_or_else(|| Failure(ImputerStatus::NullPointer, "model is null".into()))
}

/// Number of vocabulary tokens; lattices have one more column for the blank.
/// Returns 0 for a null model.
///
/// # Safety
/// `model` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn imputer_model_num_tokens(model: *const ImputerModel) -> u32 {
    model.as_ref().map_or(0, |m| m.params.vocab().num_tokens())
}

/// Feature dimension expected per frame. Returns 0 for a null model.
///
/// # Safety
/// `model` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn imputer_model_feature_dim(model: *const ImputerModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config().feature_dim)
}

/// Alignment slots produced for `frames` input frames. Returns 0 for a null
/// model.
///
/// # Safety
/// `model` is null or a live model.
#[no_mangle]
pub unsafe extern "C" fn imputer_model_slots(model: *const ImputerModel, frames: usize) -> usize {
    model.as_ref().map_or(0, |m| m.params.config().slots_for(frames))
}

unsafe fn features(m: &ImputerModel, ptr: *const f64, frames: usize) -> FfiResult<FeatureSeq> {
    let dim = m.params.config().feature_dim;
    let len = frames
        .checked_mul(dim)
        .ok_or_else(|| invalid("feature size overflows"))?;
    Ok(FeatureSeq::new(frames, dim, slice(ptr, len, "features")?.to_vec())?)
}

/// Score one partial alignment: writes `slots * (num_tokens + 1)` log
/// probabilities. `partial` holds `slots` ids with `num_tokens + 1` as mask.
///
/// # Safety
/// `features` holds `frames * feature_dim` doubles, `partial` holds
/// `imputer_model_slots(model, frames)` ids, and `out_log_probs` is writable
/// for `slots * (num_tokens + 1)` doubles.
#[no_mangle]
pub unsafe extern "C" fn imputer_model_forward(
    model: *const ImputerModel,
    features_ptr: *const f64,
    frames: usize,
    partial_ptr: *const u32,
    out_log_probs: *mut f64,
) -> ImputerStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = features(m, features_ptr, frames)?;
        let slots = m.params.config().slots_for(frames);
        let vocab = m.params.vocab();
        let p = partial(partial_ptr, slots, &vocab)?;
        let l = m.params.forward(&x, &p)?;
        slice_mut(out_log_probs, l.values().len(), "out_log_probs")?.copy_from_slice(l.values());
        Ok(())
    })
}

/// Decode a label sequence. `strategy` is an [`ImputerStrategy`] value and
/// `k` is only read by the top-k strategy.
/// On success or `IMPUTER_STATUS_BUFFER_TOO_SMALL`, `out_len` receives the
/// number of labels; they are written to `out_labels` only if they fit in
/// `capacity`.
///
/// # Safety
/// `features` holds `frames * feature_dim` doubles, `out_labels` is writable
/// for `capacity` ids, `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn imputer_model_decode(
    model: *const ImputerModel,
    features_ptr: *const f64,
    frames: usize,
    block_size: usize,
    strategy: u32,
    k: usize,
    out_labels: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> ImputerStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = features(m, features_ptr, frames)?;
        let cfg = DecodeConfig {
            block_size,
            strategy: strategy_from(strategy)?,
            k,
        };
        cfg.validate()?;
        let (y, _) = decoder::decode(&m.params, &x, &cfg)?;
        let len = out(out_len, "out_len")?;
        *len = y.len();
        if y.len() > capacity {
            return Err(Failure(
                ImputerStatus::BufferTooSmall,
                format!("{} labels do not fit in {capacity}", y.len()),
            ));
        }
        slice_mut(out_labels, y.len(), "out_labels")?.copy_from_slice(y.ids());
        Ok(())
    })
}
