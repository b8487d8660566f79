//! C interface to racapnet.
//!
//! Every fallible function returns a [`RacapStatus`]; on anything but
//! `RACAP_STATUS_OK` the message is available from [`racap_last_error`] on the same
//! thread. Models are opaque handles created by [`racap_model_load`] and
//! released with [`racap_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use racapnet::capsule::squash_values;
use racapnet::eval::{pr_curve, Prediction, RelationScorer};
use racapnet::features::BagKey;
use racapnet::harness::{load_checkpoint, Model};
use racapnet::Error;

/// Opaque model handle.
pub struct RacapModel(Model);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RacapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    /// Input violates a model precondition, e.g. sentence too long.
    Contract = 5,
    BufferTooSmall = 6,
    Metric = 7,
    Panic = 8,
    Internal = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(RacapStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => RacapStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => RacapStatus::Checkpoint,
            Error::Contract(_) | Error::Dimension { .. } => RacapStatus::Contract,
            Error::Config(_) => RacapStatus::InvalidArgument,
            Error::Metric(_) => RacapStatus::Metric,
            _ => RacapStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RacapStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RacapStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RacapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RacapStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
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
            RacapStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const RacapModel) -> Result<&'a Model, Fail> {
    model.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn in_slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn tokens<'a>(ptr: *const *const c_char, len: usize) -> Result<Vec<&'a str>, Fail> {
    in_slice(ptr, len, "tokens")?
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p.is_null() {
                return Err(null(&format!("token {i}")));
            }
            CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("token {i} is not UTF-8")))
        })
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn racap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn racap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn racap_model_load(path: *const c_char, out: *mut *mut RacapModel) -> RacapStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_checkpoint(Path::new(p))?;
        *out = Box::into_raw(Box::new(RacapModel(model)));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`racap_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn racap_model_free(model: *mut RacapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of relation ids, NA (id 0) included. Score buffers must hold this many values.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn racap_model_num_relations(model: *const RacapModel, out: *mut usize) -> RacapStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_slice(out, 1, "out")?[0] = m.relations.len();
        Ok(())
    })
}

/// Maximum sentence length accepted by the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn racap_model_max_len(model: *const RacapModel, out: *mut usize) -> RacapStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_slice(out, 1, "out")?[0] = m.config.max_len;
        Ok(())
    })
}

/// Copies the name of relation `id` into `buf` with a trailing NUL. `needed`
/// (optional) receives the required size including the NUL; when `buf_len`
/// is too small nothing is written and `RACAP_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `buf` must be writable for `buf_len` bytes; `needed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn racap_model_relation_name(
    model: *const RacapModel,
    id: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> RacapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let name = m
            .relations
            .name(id)
            .ok_or_else(|| invalid(format!("relation id {id} out of range")))?;
        let size = name.len() + 1;
        if !needed.is_null() {
            *needed = size;
        }
        if buf_len < size {
            return Err(Fail(RacapStatus::BufferTooSmall, format!("name needs {size} bytes")));
        }
        let dst = out_slice(buf.cast::<u8>(), size, "buf")?;
        dst[..name.len()].copy_from_slice(name.as_bytes());
        dst[name.len()] = 0;
        Ok(())
    })
}

/// Current decision threshold.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn racap_model_threshold(model: *const RacapModel, out: *mut f64) -> RacapStatus {
    guard(|| {
        let m = model_ref(model)?;
        out_slice(out, 1, "out")?[0] = m.threshold();
        Ok(())
    })
}

/// Relation capsule lengths for one sentence, indexed by relation id.
/// `ent1` and `ent2` are token positions; unknown words map to UNK.
///
/// # Safety
/// `tokens` must point to `n_tokens` NUL-terminated strings and `out` must
/// be writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn racap_model_scores(
    model: *const RacapModel,
    tokens: *const *const c_char,
    n_tokens: usize,
    ent1: usize,
    ent2: usize,
    out: *mut f64,
    out_len: usize,
) -> RacapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let words = self::tokens(tokens, n_tokens)?;
        let s = m.relation_scores(&m.instance_from_tokens(&words, ent1, ent2)?)?;
        if out_len < s.len() {
            return Err(Fail(RacapStatus::BufferTooSmall, format!("need {} scores", s.len())));
        }
        out_slice(out, s.len(), "out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Predicted relation set as one flag per relation id (1 = present). NA is
/// flagged alone when no relation clears the threshold.
///
/// # Safety
/// As for [`racap_model_scores`], with `out` writable for `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn racap_model_predict(
    model: *const RacapModel,
    tokens: *const *const c_char,
    n_tokens: usize,
    ent1: usize,
    ent2: usize,
    out: *mut u8,
    out_len: usize,
) -> RacapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let words = self::tokens(tokens, n_tokens)?;
        let inst = m.instance_from_tokens(&words, ent1, ent2)?;
        let set = m.predict(&inst)?;
        let n = m.relations.len();
        if out_len < n {
            return Err(Fail(RacapStatus::BufferTooSmall, format!("need {n} flags")));
        }
        let dst = out_slice(out, n, "out")?;
        for (r, d) in dst.iter_mut().enumerate() {
            *d = u8::from(set.contains(&r));
        }
        Ok(())
    })
}

/// Squash nonlinearity on one vector of length `n`; `out` may alias `v`.
///
/// # Safety
/// `v` must be readable and `out` writable for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn racap_squash(v: *const f64, n: usize, out: *mut f64) -> RacapStatus {
    guard(|| {
        let input = in_slice(v, n, "v")?.to_vec();
        if input.iter().any(|x| !x.is_finite()) {
            return Err(invalid("input is not finite"));
        }
        let y = squash_values(&input);
        out_slice(out, n, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Area under the precision-recall curve of `n` ranked predictions.
/// `correct[i]` is non-zero when prediction `i` is a true fact; `total_gold`
/// counts all true facts, including ones never predicted. Ties in `scores`
/// keep input order.
///
/// # Safety
/// `scores` and `correct` must be readable for `n` elements and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn racap_pr_area(
    scores: *const f64,
    correct: *const u8,
    n: usize,
    total_gold: usize,
    out: *mut f64,
) -> RacapStatus {
    guard(|| {
        let s = in_slice(scores, n, "scores")?;
        let c = in_slice(correct, n, "correct")?;
        let hits = c.iter().filter(|&&x| x != 0).count();
        if total_gold < hits {
            return Err(invalid(format!("{hits} correct predictions exceed {total_gold} gold facts")));
        }
        let key = |i: usize| BagKey::new(format!("{i:020}"), "");
        let preds: Vec<Prediction> = s
            .iter()
            .enumerate()
            .map(|(i, &score)| Prediction {
                bag_key: key(i),
                relation: 1,
                score,
            })
            .collect();
        let mut gold: BTreeSet<_> = (0..n).filter(|&i| c[i] != 0).map(|i| (key(i), 1)).collect();
        gold.extend((0..total_gold - hits).map(|i| (BagKey::new("", format!("{i}")), 1)));
        out_slice(out, 1, "out")?[0] = pr_curve(&preds, &gold)?.area;
        Ok(())
    })
}
