//! C ABI over `focusnet-core`.
//!
//! Every fallible function returns an [`FnStatus`]; on failure the message is
//! available from [`fn_last_error`] on the same thread. Models are opaque
//! [`FnModel`] handles released with [`fn_model_free`]. Panics never cross
//! the boundary; they surface as [`FnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use focusnet_core::data::{normalize, synth_generate, write_dataset, NormalizationStats, SegmentationSample};
use focusnet_core::metrics::{confusion, metrics_from_confusion, BinaryMask, Metric};
use focusnet_core::model::{ArchConfig, FocusNetParams};
use focusnet_core::train::{dice_value, load_checkpoint, save_checkpoint, CheckpointRecord};
use focusnet_core::{Error, ErrorKind, RngState, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct FnModel {
    params: FocusNetParams<f32>,
    normalization: Option<NormalizationStats>,
    best_val_loss: f64,
    epoch: u32,
}

/// Confusion counts and the five metrics for one mask pair.
/// `degenerate` has bit i set when metric i (SE, SP, AC, JI, DI) was 0/0.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FnMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
    pub ji: f64,
    pub di: f64,
    pub degenerate: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FnStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            FnStatus::NullArgument
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            FnStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.kind() {
                ErrorKind::Config => FnStatus::Config,
                ErrorKind::Data => FnStatus::Data,
                ErrorKind::Numerical => FnStatus::Numerical,
            }
        }
        Err(_) => {
            set_error("internal panic");
            FnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::Invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn model_arg<'a>(m: *const FnModel) -> Result<&'a FnModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

fn into_handle(m: FnModel) -> *mut FnModel {
    Box::into_raw(Box::new(m))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn fn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a freshly initialized model from `key = value` architecture text
/// (NULL selects the small default architecture).
///
/// # Safety
/// `arch_text` is NULL or a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fn_model_build(arch_text: *const c_char, seed: u64, out: *mut *mut FnModel) -> FnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let arch = if arch_text.is_null() {
            ArchConfig::tiny()
        } else {
            let text = CStr::from_ptr(arch_text)
                .to_str()
                .map_err(|_| Failure::Invalid("arch_text is not UTF-8".to_string()))?;
            ArchConfig::from_text(text)?
        };
        let params = FocusNetParams::build(&arch, &mut RngState::new(seed))?;
        *out = into_handle(FnModel {
            params,
            normalization: None,
            best_val_loss: f64::NAN,
            epoch: 0,
        });
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI or [`fn_model_save`].
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fn_model_load(path: *const c_char, out: *mut *mut FnModel) -> FnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let rec = load_checkpoint(&path_arg(path, "path")?).map_err(|e| match e {
            Error::Io { path, source } => Error::Checkpoint(format!("{}: {source}", path.display())),
            other => other,
        })?;
        let params = rec.to_model()?;
        *out = into_handle(FnModel {
            params,
            normalization: rec.normalization,
            best_val_loss: rec.best_val_loss,
            epoch: rec.epoch,
        });
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fn_model_save(model: *const FnModel, path: *const c_char) -> FnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let rec = CheckpointRecord::new(&m.params, m.normalization.clone(), m.best_val_loss, m.epoch);
        save_checkpoint(&rec, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` is NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn fn_model_free(model: *mut FnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count, or 0 for a NULL handle.
///
/// # Safety
/// `model` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fn_model_param_count(model: *const FnModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_params())
}

/// Expected input channels and square input size.
///
/// # Safety
/// `model` is a live handle; `channels` and `size` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fn_model_input_shape(model: *const FnModel, channels: *mut usize, size: *mut usize) -> FnStatus {
    guard(|| {
        let m = model_arg(model)?;
        *out_arg(channels, "channels")? = m.params.arch.in_channels;
        *out_arg(size, "size")? = m.params.arch.input_size;
        Ok(())
    })
}

/// Eval-mode probabilities for `batch` images laid out `[batch, channels, size, size]`
/// with values in [0, 1]. Normalization stored in the checkpoint is applied first.
/// `out` receives `batch · size · size` probabilities.
///
/// # Safety
/// `input` holds `batch·channels·size·size` floats and `out` has room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn fn_model_predict(
    model: *const FnModel,
    input: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> FnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let (c, s) = (m.params.arch.in_channels, m.params.arch.input_size);
        if batch == 0 {
            return Err(Failure::Invalid("batch must be positive".to_string()));
        }
        if out_len != batch * s * s {
            return Err(Failure::Invalid(format!("out_len {out_len}, expected {}", batch * s * s)));
        }
        let data = slice_arg(input, batch * c * s * s, "input")?;
        let mut items = Vec::with_capacity(batch);
        for b in 0..batch {
            let img = Tensor::new(&[c, s, s], data[b * c * s * s..(b + 1) * c * s * s].to_vec())?;
            items.push(match &m.normalization {
                Some(stats) => normalize(&SegmentationSample::new("input", img, Tensor::zeros(&[1, s, s]))?, stats)?.image,
                None => img,
            });
        }
        let x = Tensor::stack(&items)?;
        let prob = m.params.predict(&x)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(prob.data());
        Ok(())
    })
}

/// Confusion counts and metrics for two binary masks of `len` bytes (nonzero = foreground).
///
/// # Safety
/// `pred` and `gt` hold `len` bytes; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fn_metrics(pred: *const u8, gt: *const u8, len: usize, out: *mut FnMetrics) -> FnStatus {
    guard(|| {
        let mask = |p: &[u8]| BinaryMask::new(&[len], p.iter().map(|&v| v != 0).collect());
        let pred = mask(slice_arg(pred, len, "pred")?)?;
        let gt = mask(slice_arg(gt, len, "gt")?)?;
        let c = confusion(&pred, &gt)?;
        let m = metrics_from_confusion(&c)?;
        let degenerate = Metric::ALL
            .iter()
            .enumerate()
            .filter(|(_, k)| m.degenerate.contains(k))
            .fold(0u32, |acc, (i, _)| acc | (1 << i));
        *out_arg(out, "out")? = FnMetrics {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            se: m.values.se,
            sp: m.values.sp,
            ac: m.values.ac,
            ji: m.values.ji,
            di: m.values.di,
            degenerate,
        };
        Ok(())
    })
}

/// Smoothed dice loss over `len` probabilities and binary ground-truth values.
///
/// # Safety
/// `prob` and `gt` hold `len` floats; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fn_dice_loss(prob: *const f32, gt: *const f32, len: usize, smooth: f64, out: *mut f64) -> FnStatus {
    guard(|| {
        let p = Tensor::new(&[len], slice_arg(prob, len, "prob")?.to_vec())?;
        let g = Tensor::new(&[len], slice_arg(gt, len, "gt")?.to_vec())?;
        *out_arg(out, "out")? = dice_value(&p, &g, smooth)?;
        Ok(())
    })
}

/// Writes `n` synthetic image/mask pairs under `dir` (images/ and masks/).
///
/// # Safety
/// `dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fn_synth_write(n: usize, size: usize, channels: usize, seed: u64, dir: *const c_char) -> FnStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let m = synth_generate(n, size, channels, &mut RngState::new(seed))?;
        write_dataset(&m, &dir)?;
        Ok(())
    })
}
