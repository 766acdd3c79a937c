//! C ABI over the `attreg` library.
//!
//! Every fallible function returns an [`AttregStatus`]; on failure the message
//! is available from [`attreg_last_error`] on the same thread until the next
//! call. Models and datasets are opaque handles released with their `_free`
//! function. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use attreg::attreg::RegConfig;
use attreg::faitheval;
use attreg::harness::{self, evaluate_with, split_path, TrainConfig};
use attreg::model::{load_checkpoint, save_checkpoint, AttentionMode, Model, ModelConfig};
use attreg::synthdata::{generate_benchmark, read_split, write_split, DataConfig, DatasetSplit, SplitName};
use attreg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Numeric = 7,
    Vocabulary = 8,
    Panic = 9,
}

/// Trained model handle.
pub struct AttregModel(Model);

/// Dataset split handle.
pub struct AttregDataset(DatasetSplit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(AttregStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => AttregStatus::Io,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) | Error::Checkpoint(_) => AttregStatus::Parse,
            Error::Config(_) => AttregStatus::Config,
            Error::Diff(_) | Error::Diverged { .. } | Error::NoActiveDetections => AttregStatus::Numeric,
            Error::UnknownAnswer(_) | Error::UnknownToken(_) | Error::VocabMismatch => AttregStatus::Vocabulary,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: AttregStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AttregStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AttregStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AttregStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(AttregStatus::NullPointer, format!("{name} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(AttregStatus::InvalidUtf8, format!("{name} is not valid UTF-8")),
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(AttregStatus::NullPointer, format!("{name} is null")), Ok)
}

fn out<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(AttregStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn attreg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates the benchmark with default settings except the split sizes and
/// writes `train.jsonl`, `val_indomain.jsonl` and `test_ood.jsonl` to `dir`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn attreg_generate_splits(
    dir: *const c_char,
    seed: u64,
    train_size: usize,
    val_size: usize,
    test_size: usize,
) -> AttregStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let config = DataConfig {
            train_size,
            val_size,
            test_size,
            ..DataConfig::default()
        };
        let bench = generate_benchmark(&config, seed)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for name in SplitName::ALL {
            write_split(&split_path(&dir, name), bench.split(name))?;
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_dataset_load(path: *const c_char, out: *mut *mut AttregDataset) -> AttregStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        self::out(out, "out")?;
        let split = read_split(&path)?;
        *out = Box::into_raw(Box::new(AttregDataset(split)));
        Ok(())
    })
}

/// Number of instances, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn attreg_dataset_len(dataset: *const AttregDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn attreg_dataset_free(dataset: *mut AttregDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_model_load(path: *const c_char, out: *mut *mut AttregModel) -> AttregStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        self::out(out, "out")?;
        let model = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(AttregModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn attreg_model_save(model: *const AttregModel, path: *const c_char) -> AttregStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&path, &model.0)?;
        Ok(())
    })
}

/// Trains a model from scratch with the plain loss for `epochs` epochs and
/// keeps the best epoch on `val`.
///
/// # Safety
/// `train` and `val` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_pretrain(
    train: *const AttregDataset,
    val: *const AttregDataset,
    epochs: usize,
    seed: u64,
    out: *mut *mut AttregModel,
) -> AttregStatus {
    guard(|| {
        let train = handle(train, "train")?;
        let val = handle(val, "val")?;
        self::out(out, "out")?;
        let config = TrainConfig {
            pretrain_epochs: epochs,
            ..TrainConfig::default()
        };
        let pre = harness::pretrain(&ModelConfig::default(), &train.0, &val.0, &config, seed)?;
        *out = Box::into_raw(Box::new(AttregModel(pre.model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn attreg_model_free(model: *mut AttregModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of candidate answers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn attreg_model_num_answers(model: *const AttregModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.answer_vocab.len())
}

/// Overall accuracy of `model` on `dataset`. A non-zero `uniform_attention`
/// replaces learned attention with uniform weights over active detections.
///
/// # Safety
/// Handles must be live and `accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_evaluate(
    model: *const AttregModel,
    dataset: *const AttregDataset,
    uniform_attention: i32,
    accuracy: *mut f64,
) -> AttregStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let dataset = handle(dataset, "dataset")?;
        out(accuracy, "accuracy")?;
        let mode = if uniform_attention != 0 {
            AttentionMode::Uniform
        } else {
            AttentionMode::Learned
        };
        *accuracy = evaluate_with(&model.0, &dataset.0, mode)?.overall;
        Ok(())
    })
}

fn instance(dataset: &AttregDataset, index: usize) -> Result<&attreg::synthdata::Instance, Failure> {
    dataset.0.instances.get(index).map_or_else(
        || {
            fail(
                AttregStatus::InvalidArgument,
                format!("index {index} out of range for {} instances", dataset.0.len()),
            )
        },
        Ok,
    )
}

/// Predicted answer index for one instance.
///
/// # Safety
/// Handles must be live and `answer` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_predict(
    model: *const AttregModel,
    dataset: *const AttregDataset,
    index: usize,
    answer: *mut usize,
) -> AttregStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let inst = instance(handle(dataset, "dataset")?, index)?;
        out(answer, "answer")?;
        *answer = faitheval::predict(&model.0, &inst.scene, &inst.qa.question_tokens)?;
        Ok(())
    })
}

/// Copies the answer string for `answer` into `buf` with a trailing NUL.
/// `needed` receives the required buffer size including the NUL, so a call
/// with `buf_len == 0` queries the size.
///
/// # Safety
/// `model` must be live, `buf` writable for `buf_len` bytes, `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_answer_text(
    model: *const AttregModel,
    answer: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> AttregStatus {
    guard(|| {
        let model = handle(model, "model")?;
        out(needed, "needed")?;
        let vocab = &model.0.answer_vocab;
        if answer >= vocab.len() {
            return fail(AttregStatus::InvalidArgument, format!("answer {answer} out of range"));
        }
        let text = vocab.token(answer).as_bytes();
        *needed = text.len() + 1;
        if buf_len == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return fail(AttregStatus::NullPointer, "buf is null");
        }
        if buf_len < text.len() + 1 {
            return fail(AttregStatus::InvalidArgument, "buffer too small");
        }
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Attention weights over the detections of one instance. `weights` must hold
/// at least as many entries as the scene has detections; `count` receives
/// that number, and a null `weights` queries it.
///
/// # Safety
/// Handles must be live, `weights` null or writable for `capacity` values,
/// `count` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_attention(
    model: *const AttregModel,
    dataset: *const AttregDataset,
    index: usize,
    weights: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> AttregStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let inst = instance(handle(dataset, "dataset")?, index)?;
        out(count, "count")?;
        *count = inst.scene.len();
        if weights.is_null() {
            return Ok(());
        }
        if capacity < inst.scene.len() {
            return fail(AttregStatus::InvalidArgument, "weights buffer too small");
        }
        let att = model
            .0
            .infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)?
            .attention;
        std::ptr::copy_nonoverlapping(att.as_ptr(), weights, att.len());
        Ok(())
    })
}

/// Mean number of key objects the model ranks among its ignored detections.
///
/// # Safety
/// Handles must be live and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_ignored_key_count(
    model: *const AttregModel,
    dataset: *const AttregDataset,
    sigma: f64,
    top_m: usize,
    ignored_pct: f64,
    result: *mut f64,
) -> AttregStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let dataset = handle(dataset, "dataset")?;
        out(result, "result")?;
        let reg = RegConfig {
            sigma,
            top_m,
            ignored_pct,
            ..RegConfig::default()
        };
        reg.validate()?;
        *result = faitheval::ignored_key_count(&model.0, &dataset.0.instances, &reg)?;
        Ok(())
    })
}

/// Total variation distance between two score vectors of length `len`.
///
/// # Safety
/// `p` and `q` must be readable for `len` values and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn attreg_tvd(p: *const f64, q: *const f64, len: usize, result: *mut f64) -> AttregStatus {
    guard(|| {
        if len > 0 && (p.is_null() || q.is_null()) {
            return fail(AttregStatus::NullPointer, "input is null");
        }
        out(result, "result")?;
        let (p, q) = if len == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(p, len), std::slice::from_raw_parts(q, len))
        };
        *result = faitheval::tvd(p, q)?;
        Ok(())
    })
}
