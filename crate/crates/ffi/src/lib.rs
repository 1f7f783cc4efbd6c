//! C interface to posg-core.
//!
//! Models and samplers are opaque handles created by `*_new`/`*_load` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`PosgStatus`]; the message for the most recent failure on the calling
//! thread is available from [`posg_last_error`]. Panics never cross the
//! boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use posg::corpus::{EncodedCorpus, EncodedSequence};
use posg::decode::{generate, SamplingConfig, StageStrategy};
use posg::net::{load_checkpoint, Model};
use posg::{CategoricalDist, HeadKind, Lexicon};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded checkpoint with its lexicon.
pub struct PosgModel {
    model: Model,
    lexicon: Lexicon,
}

/// Sampling settings for [`posg_generate`].
pub struct PosgSampler {
    config: SamplingConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(PosgStatus, String);

fn fail<T>(status: PosgStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PosgStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (PosgStatus::Ok, String::new()),
        Ok(Err(Failure(status, message))) => (status, message),
        Err(_) => (PosgStatus::Panic, "internal panic".to_string()),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
    status
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(PosgStatus::NullPointer, format!("{name} is null"));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .or_else(|_| fail(PosgStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.map_or_else(|| fail(PosgStatus::NullPointer, format!("{name} is null")), Ok)
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(PosgStatus::NullPointer, format!("{name} is null"));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn load(checkpoint: &str, lexicon: &str) -> Result<PosgModel, Failure> {
    let read = |p: &str| std::fs::read(Path::new(p)).or_else(|e| fail(PosgStatus::Io, format!("{p}: {e}")));
    let model = load_checkpoint(&read(checkpoint)?).or_else(|e| fail(PosgStatus::Data, format!("{checkpoint}: {e}")))?;
    let text = String::from_utf8(read(lexicon)?).or_else(|_| fail(PosgStatus::Data, format!("{lexicon}: not UTF-8")))?;
    let lexicon_data = Lexicon::from_json(&text).or_else(|e| fail(PosgStatus::Data, format!("{lexicon}: {e}")))?;
    if lexicon_data.vocab.len() != model.config.vocab_size || lexicon_data.inventory.len() != model.config.pos_count {
        return fail(PosgStatus::Data, "lexicon does not match the checkpoint");
    }
    Ok(PosgModel {
        model,
        lexicon: lexicon_data,
    })
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `capacity`) and returns its full length including the NUL.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[unsafe(no_mangle)]
pub extern "C" fn posg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint and its lexicon into `*out`.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_model_load(
    checkpoint_path: *const c_char,
    lexicon_path: *const c_char,
    out: *mut *mut PosgModel,
) -> PosgStatus {
    guard(|| {
        if out.is_null() {
            return fail(PosgStatus::NullPointer, "out is null");
        }
        let ckpt = unsafe { str_arg(checkpoint_path, "checkpoint_path") }?;
        let lex = unsafe { str_arg(lexicon_path, "lexicon_path") }?;
        let model = load(ckpt, lex)?;
        unsafe { *out = Box::into_raw(Box::new(model)) };
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_model_free(model: *mut PosgModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Vocabulary size, or 0 for a null handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_model_vocab_size(model: *const PosgModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.lexicon.vocab.len())
}

/// Number of tags including the special tag, or 0 for a null handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_model_pos_count(model: *const PosgModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.lexicon.inventory.len())
}

/// 1 for a factorized head, 0 for a plain softmax, -1 for a null handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_model_is_posg(model: *const PosgModel) -> i32 {
    match unsafe { model.as_ref() } {
        Some(m) if m.model.head == HeadKind::Posg => 1,
        Some(_) => 0,
        None => -1,
    }
}

/// Id of `word`, or the unknown-token id when it is not in the vocabulary.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_model_token_id(model: *const PosgModel, word: *const c_char, out: *mut usize) -> PosgStatus {
    guard(|| {
        let m = unsafe { ref_arg(model, "model") }?;
        let w = unsafe { str_arg(word, "word") }?;
        if out.is_null() {
            return fail(PosgStatus::NullPointer, "out is null");
        }
        unsafe { *out = m.lexicon.vocab.id(w) };
        Ok(())
    })
}

/// Creates a sampler from stage strings such as `top_k:5` or `nucleus:0.5`.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_sampler_new(
    pos_stage: *const c_char,
    token_stage: *const c_char,
    seed: u64,
    out: *mut *mut PosgSampler,
) -> PosgStatus {
    guard(|| {
        if out.is_null() {
            return fail(PosgStatus::NullPointer, "out is null");
        }
        let parse = |p, name| -> Result<StageStrategy, Failure> {
            let s = unsafe { str_arg(p, name) }?;
            s.parse().or_else(|e| fail(PosgStatus::InvalidArgument, format!("{name}: {e}")))
        };
        let config = SamplingConfig {
            pos_stage: parse(pos_stage, "pos_stage")?,
            token_stage: parse(token_stage, "token_stage")?,
            control: Default::default(),
            seed,
        };
        config
            .validate()
            .or_else(|e| fail(PosgStatus::InvalidArgument, e.to_string()))?;
        unsafe { *out = Box::into_raw(Box::new(PosgSampler { config })) };
        Ok(())
    })
}

/// Multiplies tag `tag`'s probability by `multiplier` before truncation.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_sampler_set_control(
    sampler: *mut PosgSampler,
    model: *const PosgModel,
    tag: *const c_char,
    multiplier: f64,
) -> PosgStatus {
    guard(|| {
        let s = unsafe { sampler.as_mut() }.map_or_else(|| fail(PosgStatus::NullPointer, "sampler is null"), Ok)?;
        let m = unsafe { ref_arg(model, "model") }?;
        let t = unsafe { str_arg(tag, "tag") }?;
        let id = m
            .lexicon
            .inventory
            .get(t)
            .map_or_else(|| fail(PosgStatus::InvalidArgument, format!("unknown tag {t:?}")), Ok)?;
        if !(multiplier.is_finite() && multiplier >= 0.0) {
            return fail(PosgStatus::InvalidArgument, "multiplier must be finite and non-negative");
        }
        s.config.control.insert(id, multiplier);
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_sampler_free(sampler: *mut PosgSampler) {
    if !sampler.is_null() {
        drop(unsafe { Box::from_raw(sampler) });
    }
}

/// Samples `length` tokens after `prefix` into `out_tokens`, and the sampled
/// tags into `out_pos` when it is non-null and the head is factorized. Both
/// buffers hold `capacity` entries; `*out_written` receives the count.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_generate(
    model: *const PosgModel,
    sampler: *const PosgSampler,
    prefix: *const usize,
    prefix_len: usize,
    length: usize,
    out_tokens: *mut usize,
    out_pos: *mut usize,
    capacity: usize,
    out_written: *mut usize,
) -> PosgStatus {
    guard(|| {
        let m = unsafe { ref_arg(model, "model") }?;
        let s = unsafe { ref_arg(sampler, "sampler") }?;
        let prefix = unsafe { slice_arg(prefix, prefix_len, "prefix") }?;
        if out_written.is_null() || (length > 0 && out_tokens.is_null()) {
            return fail(PosgStatus::NullPointer, "output buffer is null");
        }
        if capacity < length {
            return fail(PosgStatus::BufferTooSmall, format!("capacity {capacity} < length {length}"));
        }
        let record = generate(&m.model, Some(&m.lexicon.partition), prefix, length, &s.config)
            .or_else(|e| fail(PosgStatus::InvalidArgument, e.to_string()))?;
        let n = record.continuation.len();
        unsafe {
            std::ptr::copy_nonoverlapping(record.continuation.as_ptr(), out_tokens, n);
            if let (Some(pos), false) = (&record.sampled_pos, out_pos.is_null()) {
                std::ptr::copy_nonoverlapping(pos.as_ptr(), out_pos, n);
            }
            *out_written = n;
        }
        Ok(())
    })
}

/// Perplexity of one token sequence (without BOS/EOS, which are added).
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_perplexity(
    model: *const PosgModel,
    tokens: *const usize,
    len: usize,
    out: *mut f64,
) -> PosgStatus {
    guard(|| {
        let m = unsafe { ref_arg(model, "model") }?;
        let tokens = unsafe { slice_arg(tokens, len, "tokens") }?;
        if out.is_null() {
            return fail(PosgStatus::NullPointer, "out is null");
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= m.lexicon.vocab.len()) {
            return fail(PosgStatus::InvalidArgument, format!("token id {bad} out of range"));
        }
        let corpus = EncodedCorpus {
            sequences: vec![EncodedSequence {
                tokens: tokens.to_vec(),
                pos: m.lexicon.tag(tokens),
            }],
            coerced: 0,
        };
        let ppl = posg::metrics::perplexity(&m.model, Some(&m.lexicon.partition), &corpus)
            .or_else(|e| fail(PosgStatus::Runtime, e.to_string()))?;
        unsafe { *out = ppl };
        Ok(())
    })
}

/// Entropy in nats of `probs` after top-`k` truncation and renormalization.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn posg_entropy_topk(probs: *const f64, n: usize, k: usize, out: *mut f64) -> PosgStatus {
    guard(|| {
        let p = unsafe { slice_arg(probs, n, "probs") }?;
        if out.is_null() {
            return fail(PosgStatus::NullPointer, "out is null");
        }
        if k == 0 {
            return fail(PosgStatus::InvalidArgument, "k must be positive");
        }
        let dist = CategoricalDist::new((0..n).collect(), p.to_vec())
            .or_else(|e| fail(PosgStatus::InvalidArgument, e.to_string()))?;
        unsafe { *out = posg::oracle::entropy_topk(&dist, k) };
        Ok(())
    })
}
