//! C ABI over `sfxgan`.
//!
//! Every function returns an [`SfxStatus`] (or a plain value for infallible
//! accessors). On failure the message is kept per thread and read with
//! [`sfx_last_error`]. Handles are opaque and owned by the caller, who releases them
//! with the matching `*_free` function. Panics never cross the boundary; they are
//! reported as [`SfxStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use sfxgan::audio_io::load_layers;
use sfxgan::checkpoint::Checkpoint;
use sfxgan::config::ExperimentManifest;
use sfxgan::inference::{synthesize_batch, SynthesisParams, Variation};
use sfxgan::training::{train_with, TrainObserver};
use sfxgan::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfxStatus {
    Ok = 0,
    NullPointer = 1,
    /// Rejected input: bad parameters, manifest or audio files.
    InvalidArgument = 2,
    Io = 3,
    /// Missing, truncated or inconsistent checkpoint.
    Checkpoint = 4,
    /// Training produced non-finite values. The last completed stage is on disk.
    Divergence = 5,
    OutOfRange = 6,
    Panic = 7,
    Internal = 8,
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

fn status_of(err: &Error) -> SfxStatus {
    match err {
        _ if err.is_validation() => SfxStatus::InvalidArgument,
        Error::Io { .. } | Error::Wav { .. } => SfxStatus::Io,
        Error::MissingBlob { .. } | Error::Checkpoint { .. } => SfxStatus::Checkpoint,
        Error::Divergence { .. } => SfxStatus::Divergence,
        _ => SfxStatus::Internal,
    }
}

/// Run `f`, translating errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SfxStatus, String)>) -> SfxStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfxStatus::Ok,
        Ok(Err((status, msg))) => {
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
            SfxStatus::Panic
        }
    }
}

fn lift(err: Error) -> (SfxStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (SfxStatus, String) {
    (SfxStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (SfxStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SfxStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null. Valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sfx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A trained model loaded from a checkpoint directory.
pub struct SfxCheckpoint {
    inner: Checkpoint,
}

/// Load the checkpoint directory at `path` into `*out`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfx_checkpoint_load(path: *const c_char, out: *mut *mut SfxCheckpoint) -> SfxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = Checkpoint::load(&path).map_err(lift)?;
        *out = Box::into_raw(Box::new(SfxCheckpoint { inner }));
        Ok(())
    })
}

/// # Safety
/// `ckpt` is null or a handle from [`sfx_checkpoint_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfx_checkpoint_free(ckpt: *mut SfxCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Layer count, or 0 for a null handle.
///
/// # Safety
/// `ckpt` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfx_checkpoint_num_layers(ckpt: *const SfxCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.inner.channels())
}

/// Sample rate in Hz, or 0 for a null handle.
///
/// # Safety
/// `ckpt` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfx_checkpoint_sample_rate(ckpt: *const SfxCheckpoint) -> u32 {
    ckpt.as_ref().map_or(0, |c| c.inner.sample_rate)
}

/// Number of trained stages, or 0 for a null handle.
///
/// # Safety
/// `ckpt` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfx_checkpoint_num_stages(ckpt: *const SfxCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.inner.stages_trained())
}

/// Synthesis parameters. Start from [`sfx_synth_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfxSynthParams {
    pub num_variations: usize,
    /// Width multipliers are drawn from `[1 - r, 1 + r]`.
    pub retarget_fraction: f64,
    /// Widths are clamped to `[ceil((1 - b) T), floor((1 + b) T)]`.
    pub retarget_bound: f64,
    pub shuffle_layers: bool,
    pub delay_min_ms: f64,
    pub delay_max_ms: f64,
    pub gain_min_db: f64,
    pub gain_max_db: f64,
    pub gl_iters: usize,
    pub seed: u64,
    /// Replay the training reconstruction instead of fresh noise; needs `retarget_fraction == 0`.
    pub use_reconstruction_noise: bool,
}

impl From<SynthesisParams> for SfxSynthParams {
    fn from(p: SynthesisParams) -> Self {
        SfxSynthParams {
            num_variations: p.num_variations,
            retarget_fraction: p.retarget_fraction,
            retarget_bound: p.retarget_bound,
            shuffle_layers: p.shuffle_layers,
            delay_min_ms: p.delay_range_ms.0,
            delay_max_ms: p.delay_range_ms.1,
            gain_min_db: p.gain_range_db.0,
            gain_max_db: p.gain_range_db.1,
            gl_iters: p.gl_iters,
            seed: p.seed,
            use_reconstruction_noise: p.use_reconstruction_noise,
        }
    }
}

impl From<SfxSynthParams> for SynthesisParams {
    fn from(p: SfxSynthParams) -> Self {
        SynthesisParams {
            num_variations: p.num_variations,
            retarget_fraction: p.retarget_fraction,
            retarget_bound: p.retarget_bound,
            shuffle_layers: p.shuffle_layers,
            delay_range_ms: (p.delay_min_ms, p.delay_max_ms),
            gain_range_db: (p.gain_min_db, p.gain_max_db),
            gl_iters: p.gl_iters,
            seed: p.seed,
            use_reconstruction_noise: p.use_reconstruction_noise,
        }
    }
}

#[no_mangle]
pub extern "C" fn sfx_synth_params_default() -> SfxSynthParams {
    SynthesisParams::default().into()
}

/// Synthesized variations.
pub struct SfxBatch {
    variations: Vec<Variation>,
}

/// Synthesize a batch from `ckpt` into `*out`.
///
/// # Safety
/// `ckpt` is a live handle, `params` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sfx_synthesize(
    ckpt: *const SfxCheckpoint,
    params: *const SfxSynthParams,
    out: *mut *mut SfxBatch,
) -> SfxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = ckpt.as_ref().ok_or_else(|| null("ckpt"))?;
        let params: SynthesisParams = (*params.as_ref().ok_or_else(|| null("params"))?).into();
        params.validate().map_err(lift)?;
        let variations = synthesize_batch(&ckpt.inner, &params).map_err(lift)?;
        *out = Box::into_raw(Box::new(SfxBatch { variations }));
        Ok(())
    })
}

/// Number of variations, or 0 for a null handle.
///
/// # Safety
/// `batch` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfx_batch_len(batch: *const SfxBatch) -> usize {
    batch.as_ref().map_or(0, |b| b.variations.len())
}

/// Borrow the mixdown of variation `index`: `*samples` points at `*len` floats owned
/// by the batch and valid until [`sfx_batch_free`].
///
/// # Safety
/// `batch` is a live handle; `samples` and `len` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sfx_batch_mix(
    batch: *const SfxBatch,
    index: usize,
    samples: *mut *const f32,
    len: *mut usize,
) -> SfxStatus {
    guard(|| {
        let batch = batch.as_ref().ok_or_else(|| null("batch"))?;
        if samples.is_null() || len.is_null() {
            return Err(null("samples/len"));
        }
        let v = batch.variations.get(index).ok_or_else(|| {
            (
                SfxStatus::OutOfRange,
                format!(
                    "variation {index} out of range (batch has {})",
                    batch.variations.len()
                ),
            )
        })?;
        *samples = v.mix.as_ptr();
        *len = v.mix.len();
        Ok(())
    })
}

/// Borrow output layer `layer` of variation `index`, after its delay and gain. Same
/// lifetime rules as [`sfx_batch_mix`].
///
/// # Safety
/// `batch` is a live handle; `samples` and `len` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sfx_batch_stem(
    batch: *const SfxBatch,
    index: usize,
    layer: usize,
    samples: *mut *const f32,
    len: *mut usize,
) -> SfxStatus {
    guard(|| {
        let batch = batch.as_ref().ok_or_else(|| null("batch"))?;
        if samples.is_null() || len.is_null() {
            return Err(null("samples/len"));
        }
        let stem = batch
            .variations
            .get(index)
            .and_then(|v| v.stems.get(layer))
            .ok_or_else(|| {
                (
                    SfxStatus::OutOfRange,
                    format!("variation {index} layer {layer} out of range"),
                )
            })?;
        *samples = stem.as_ptr();
        *len = stem.len();
        Ok(())
    })
}

/// # Safety
/// `batch` is null or a handle from [`sfx_synthesize`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfx_batch_free(batch: *mut SfxBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

struct SaveEachStage<'a>(&'a Path);

impl TrainObserver for SaveEachStage<'_> {
    fn on_stage_complete(&mut self, ckpt: &Checkpoint) -> sfxgan::Result<()> {
        ckpt.save(self.0)
    }
}

/// Train from the experiment manifest at `manifest` and write the checkpoint directory
/// `checkpoint_dir`, updated after every stage.
///
/// # Safety
/// Both arguments are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sfx_train(manifest: *const c_char, checkpoint_dir: *const c_char) -> SfxStatus {
    guard(|| {
        let manifest = path_arg(manifest, "manifest")?;
        let dir = path_arg(checkpoint_dir, "checkpoint_dir")?;
        let m = ExperimentManifest::load(&manifest).map_err(lift)?;
        let cfg = m.train_config().map_err(lift)?;
        let layers = load_layers(&m.layers, cfg.pre_pad_ms).map_err(lift)?;
        train_with(&layers, &cfg, &mut SaveEachStage(&dir)).map_err(lift)?;
        Ok(())
    })
}
