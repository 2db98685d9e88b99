//! C ABI over the spikebert toolkit.
//!
//! Every fallible call returns an [`SbStatus`]. On failure the message is
//! kept per thread and read back with [`sb_last_error_message`]. Models and
//! dumps are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spikebert::data::vocab_hash;
use spikebert::energy::{self, LayerKind, LayerProfile};
use spikebert::model::{read_checkpoint, Checkpoint, SpikeBert, TokenBatch};
use spikebert::teacher_io::{read_dump, DumpKind, TeacherDump};
use spikebert::Error;

/// Result of a C API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    Config = 6,
    Internal = 7,
}

/// A loaded checkpoint ready for inference.
pub struct SbModel {
    model: SpikeBert,
}

/// A parsed teacher dump.
pub struct SbDump {
    dump: TeacherDump,
}

/// Header fields of a teacher dump.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SbDumpInfo {
    /// 0 for feature-only dumps, 1 for dumps with logits and labels.
    pub kind: u32,
    pub layers: u32,
    pub dim: u32,
    pub max_len: u32,
    pub num_classes: u32,
    pub pad_id: i32,
    pub vocab_hash: u64,
    pub records: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SbStatus, msg: impl Into<String>) -> SbStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SbStatus {
    let status = match &e {
        Error::Io(_) => SbStatus::Io,
        Error::Format { .. } | Error::Parse { .. } => SbStatus::Format,
        Error::Data(_) => SbStatus::Data,
        Error::Config(_) => SbStatus::Config,
        Error::Input(_) | Error::Contract(_) => SbStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SbStatus) -> SbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(SbStatus::Internal, "internal panic"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, SbStatus> {
    if path.is_null() {
        return Err(fail(SbStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(SbStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Message of the last failed call on this thread, or null when the last
/// call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn publish_model(model: SpikeBert, out: *mut *mut SbModel) -> SbStatus {
    // SAFETY: callers check `out` before building the model.
    unsafe { *out = Box::into_raw(Box::new(SbModel { model })) };
    SbStatus::Ok
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_model_load(path: *const c_char, out: *mut *mut SbModel) -> SbStatus {
    guard(|| {
        if out.is_null() {
            return fail(SbStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_checkpoint(&path).and_then(Checkpoint::into_model) {
            Ok(m) => publish_model(m, out),
            Err(e) => from_error(e),
        }
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut SbModel) -> SbStatus {
    guard(|| {
        if out.is_null() || bytes.is_null() {
            return fail(SbStatus::NullPointer, "bytes or out is null");
        }
        let data = std::slice::from_raw_parts(bytes, len);
        match Checkpoint::from_bytes(data).and_then(Checkpoint::into_model) {
            Ok(m) => publish_model(m, out),
            Err(e) => from_error(e),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a model constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sb_model_free(model: *mut SbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_model_num_classes(model: *const SbModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.num_classes as u32)
}

/// Longest accepted sequence, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_model_max_len(model: *const SbModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.max_len as u32)
}

unsafe fn batch_arg(ids: *const u32, batch: usize, seq_len: usize) -> Result<TokenBatch, SbStatus> {
    if ids.is_null() {
        return Err(fail(SbStatus::NullPointer, "ids is null"));
    }
    let n = batch
        .checked_mul(seq_len)
        .ok_or_else(|| fail(SbStatus::InvalidArgument, "batch * seq_len overflows"))?;
    TokenBatch::new(std::slice::from_raw_parts(ids, n).to_vec(), batch, seq_len).map_err(from_error)
}

/// Class logits for a row-major `[batch, seq_len]` block of token ids,
/// written row-major into `out` (`batch * num_classes` floats).
///
/// # Safety
/// `ids` must hold `batch * seq_len` values and `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sb_model_logits(
    model: *const SbModel,
    ids: *const u32,
    batch: usize,
    seq_len: usize,
    out: *mut f32,
    out_len: usize,
) -> SbStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SbStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(SbStatus::NullPointer, "out is null");
        }
        let need = batch * m.model.config.num_classes;
        if out_len < need {
            return fail(SbStatus::InvalidArgument, format!("out holds {out_len} values, need {need}"));
        }
        let tb = match batch_arg(ids, batch, seq_len) {
            Ok(b) => b,
            Err(s) => return s,
        };
        match m.model.forward(&tb) {
            Ok(inf) => {
                let dst = std::slice::from_raw_parts_mut(out, need);
                for (d, &v) in dst.iter_mut().zip(&inf.logits.data) {
                    *d = v as f32;
                }
                SbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Predicted class per row of a row-major `[batch, seq_len]` id block.
///
/// # Safety
/// `ids` must hold `batch * seq_len` values and `out` must hold `batch`.
#[no_mangle]
pub unsafe extern "C" fn sb_model_predict(
    model: *const SbModel,
    ids: *const u32,
    batch: usize,
    seq_len: usize,
    out: *mut u32,
) -> SbStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SbStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(SbStatus::NullPointer, "out is null");
        }
        let tb = match batch_arg(ids, batch, seq_len) {
            Ok(b) => b,
            Err(s) => return s,
        };
        match m.model.predict(&tb) {
            Ok(labels) => {
                let dst = std::slice::from_raw_parts_mut(out, batch);
                for (d, l) in dst.iter_mut().zip(labels) {
                    *d = l as u32;
                }
                SbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Opens and validates a teacher dump.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_dump_open(path: *const c_char, out: *mut *mut SbDump) -> SbStatus {
    guard(|| {
        if out.is_null() {
            return fail(SbStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_dump(&path) {
            Ok(dump) => {
                *out = Box::into_raw(Box::new(SbDump { dump }));
                SbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a dump. Null is ignored.
///
/// # Safety
/// `dump` must come from [`sb_dump_open`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sb_dump_free(dump: *mut SbDump) {
    if !dump.is_null() {
        drop(Box::from_raw(dump));
    }
}

/// Copies the dump header into `info`.
///
/// # Safety
/// `dump` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_dump_info(dump: *const SbDump, info: *mut SbDumpInfo) -> SbStatus {
    guard(|| {
        let (Some(d), false) = (dump.as_ref(), info.is_null()) else {
            return fail(SbStatus::NullPointer, "dump or info is null");
        };
        let h = &d.dump.header;
        *info = SbDumpInfo {
            kind: match h.kind {
                DumpKind::Features => 0,
                DumpKind::Task => 1,
            },
            layers: h.layers as u32,
            dim: h.dim as u32,
            max_len: h.max_len as u32,
            num_classes: h.num_classes as u32,
            pad_id: h.pad_id,
            vocab_hash: h.vocab_hash,
            records: d.dump.len() as u64,
        };
        SbStatus::Ok
    })
}

/// Teacher logits of record `index` (`num_classes` floats).
///
/// # Safety
/// `dump` must be a live handle and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sb_dump_logits(dump: *const SbDump, index: u64, out: *mut f32, out_len: usize) -> SbStatus {
    guard(|| {
        let (Some(d), false) = (dump.as_ref(), out.is_null()) else {
            return fail(SbStatus::NullPointer, "dump or out is null");
        };
        let Some(rec) = d.dump.records.get(index as usize) else {
            return fail(SbStatus::InvalidArgument, format!("record {index} out of range"));
        };
        let Some(logits) = &rec.logits else {
            return fail(SbStatus::Data, "dump carries no logits");
        };
        if out_len < logits.len() {
            return fail(SbStatus::InvalidArgument, format!("out holds {out_len} values, need {}", logits.len()));
        }
        std::slice::from_raw_parts_mut(out, logits.len()).copy_from_slice(logits);
        SbStatus::Ok
    })
}

/// Energy in millijoules of `flops` multiply-accumulates on dense hardware.
#[no_mangle]
pub extern "C" fn sb_ann_energy_mj(flops: f64) -> f64 {
    energy::ann_energy_mj(flops)
}

/// Synaptic operations of a spiking layer with the given dense FLOPs,
/// firing rate in `[0, 1]` and time steps.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_sops(flops: u64, firing_rate: f64, time_steps: u32, out: *mut u64) -> SbStatus {
    guard(|| {
        if out.is_null() {
            return fail(SbStatus::NullPointer, "out is null");
        }
        if !(0.0..=1.0).contains(&firing_rate) {
            return fail(SbStatus::InvalidArgument, format!("firing rate {firing_rate} outside [0, 1]"));
        }
        let profile = LayerProfile {
            name: "ffi".into(),
            kind: LayerKind::SpikingFc,
            flops,
            firing_rate,
            time_steps: time_steps as usize,
        };
        match energy::sops(&profile) {
            Ok(v) => {
                *out = v;
                SbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Hash of an ordered token list, as stored in dump headers.
///
/// # Safety
/// `tokens` must point to `count` NUL-terminated strings and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_vocab_hash(tokens: *const *const c_char, count: usize, out: *mut u64) -> SbStatus {
    guard(|| {
        if out.is_null() || (tokens.is_null() && count > 0) {
            return fail(SbStatus::NullPointer, "tokens or out is null");
        }
        let mut words = Vec::with_capacity(count);
        for i in 0..count {
            let p = *tokens.add(i);
            if p.is_null() {
                return fail(SbStatus::NullPointer, format!("token {i} is null"));
            }
            match CStr::from_ptr(p).to_str() {
                Ok(s) => words.push(s),
                Err(_) => return fail(SbStatus::InvalidArgument, format!("token {i} is not valid UTF-8")),
            }
        }
        *out = vocab_hash(words.iter().copied());
        SbStatus::Ok
    })
}
