//! C ABI over `msgcn`.
//!
//! Every fallible function returns an [`MsgcnStatus`]. On failure the
//! message is kept per thread and read with [`msgcn_last_error`]. Handles are
//! opaque; each `*_free` accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use msgcn::graph::{layout_preset, load_layout, GraphLayout};
use msgcn::metrics::{f1_at_tau, sample_accuracy};
use msgcn::models::{Model, ModelConfig, ModelKind};
use msgcn::tensor::Tensor;
use msgcn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgcnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Dimension = 5,
    Internal = 6,
}

/// Skeleton graph layout.
pub struct MsgcnLayout(GraphLayout);

/// Segmentation model with its parameters and normalization statistics.
pub struct MsgcnModel(Model);

/// Segmental F1 counts at one IoU threshold.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MsgcnF1 {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MsgcnStatus {
    match e {
        Error::Dimension { .. } | Error::Shape { .. } => MsgcnStatus::Dimension,
        Error::Io { .. } => MsgcnStatus::Io,
        Error::Parse { .. } | Error::Format(_) => MsgcnStatus::Parse,
        Error::TapeConsumed => MsgcnStatus::Internal,
        _ => MsgcnStatus::InvalidArgument,
    }
}

struct Fail(MsgcnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MsgcnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MsgcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MsgcnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MsgcnStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MsgcnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn labels_of(raw: &[u32]) -> Vec<usize> {
    raw.iter().map(|&v| v as usize).collect()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn msgcn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msgcn_layout_preset(name: *const c_char, out: *mut *mut MsgcnLayout) -> MsgcnStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MsgcnLayout(layout_preset(name)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msgcn_layout_load(path: *const c_char, out: *mut *mut MsgcnLayout) -> MsgcnStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MsgcnLayout(load_layout(&path)?)));
        Ok(())
    })
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `layout` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgcn_layout_num_nodes(layout: *const MsgcnLayout) -> usize {
    layout.as_ref().map_or(0, |l| l.0.num_nodes)
}

/// # Safety
/// `layout` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msgcn_layout_free(layout: *mut MsgcnLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// Build a model with default hyperparameters. `kind` is one of `bilstm`,
/// `tcn`, `stgcn`, `ms-tcn`, `ms-gcn`.
///
/// # Safety
/// Pointers must be valid; `layout` is only read.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_new(
    kind: *const c_char,
    layout: *const MsgcnLayout,
    in_channels: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut MsgcnModel,
) -> MsgcnStatus {
    guard(|| {
        let kind: ModelKind = str_arg(kind, "kind")?.parse()?;
        let layout = layout.as_ref().ok_or_else(|| null("layout"))?;
        let out = out_arg(out, "out")?;
        let cfg = ModelConfig::new(kind, layout.0.clone(), in_channels, num_classes);
        *out = Box::into_raw(Box::new(MsgcnModel(Model::new(cfg, seed)?)));
        Ok(())
    })
}

/// Build a model from a JSON model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_from_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut MsgcnModel,
) -> MsgcnStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let out = out_arg(out, "out")?;
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Fail(MsgcnStatus::Parse, format!("model config: {e}")))?;
        *out = Box::into_raw(Box::new(MsgcnModel(Model::new(cfg, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_load(path: *const c_char, out: *mut *mut MsgcnModel) -> MsgcnStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MsgcnModel(Model::load(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_save(model: *mut MsgcnModel, path: *const c_char) -> MsgcnStatus {
    guard(|| {
        let model = out_arg(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        model.0.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_num_classes(model: *const MsgcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().num_classes)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_num_nodes(model: *const MsgcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().num_nodes())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_in_channels(model: *const MsgcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().in_channels)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_parameter_count(model: *const MsgcnModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.parameter_count())
}

/// Run inference on `values`, a row-major `[frames, nodes, channels]` array.
/// Final-stage probabilities (`frames * num_classes`) go to `probs` and the
/// argmax labels (`frames`) to `labels`; either may be null.
///
/// # Safety
/// `values` must hold `frames * nodes * channels` doubles and the output
/// buffers, when non-null, must be large enough.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_predict(
    model: *mut MsgcnModel,
    values: *const f64,
    frames: usize,
    nodes: usize,
    channels: usize,
    probs: *mut f64,
    labels: *mut u32,
) -> MsgcnStatus {
    guard(|| {
        let model = out_arg(model, "model")?;
        let n = frames * nodes * channels;
        let data = slice_arg(values, n, "values")?.to_vec();
        let x = Tensor::new(&[frames, nodes, channels], data)?;
        let pred = model.0.predict(&x)?;
        if !probs.is_null() {
            let p = pred.last().data();
            std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(p);
        }
        if !labels.is_null() {
            let out = std::slice::from_raw_parts_mut(labels, frames);
            for (o, l) in out.iter_mut().zip(pred.labels()) {
                *o = l as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msgcn_model_free(model: *mut MsgcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segmental F1 of two frame-label sequences of length `len`.
///
/// # Safety
/// `pred` and `gt` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgcn_f1_at_tau(
    pred: *const u32,
    gt: *const u32,
    len: usize,
    tau: f64,
    out: *mut MsgcnF1,
) -> MsgcnStatus {
    guard(|| {
        let p = labels_of(slice_arg(pred, len, "pred")?);
        let g = labels_of(slice_arg(gt, len, "gt")?);
        let out = out_arg(out, "out")?;
        let e = f1_at_tau(&p, &g, tau)?;
        *out = MsgcnF1 {
            tp: e.tp,
            fp: e.fp,
            fn_count: e.fn_,
            precision: e.precision,
            recall: e.recall,
            f1: e.f1,
        };
        Ok(())
    })
}

/// # Safety
/// `pred` and `gt` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msgcn_sample_accuracy(
    pred: *const u32,
    gt: *const u32,
    len: usize,
    out: *mut f64,
) -> MsgcnStatus {
    guard(|| {
        let p = labels_of(slice_arg(pred, len, "pred")?);
        let g = labels_of(slice_arg(gt, len, "gt")?);
        let out = out_arg(out, "out")?;
        *out = sample_accuracy(&p, &g)?;
        Ok(())
    })
}
