//! C interface to `arf-core`.
//!
//! Models and candidate indexes are opaque handles created by `*_load` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`ArfStatus`]; on failure [`arf_last_error_message`] describes the cause
//! for the calling thread. Output buffers are caller-allocated, with their
//! capacity passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use arf_core::anchors::{retrieve, CandidateIndex, RetrievalMode};
use arf_core::contrastive::{contrastive_loss, PairBatch};
use arf_core::encoders::{encode, Modality};
use arf_core::evaluation::{classify, ensemble_weights};
use arf_core::io::checkpoint::{read_checkpoint, write_checkpoint};
use arf_core::io::records::read_index;
use arf_core::numerics::{Matrix, Vector};
use arf_core::training::{Checkpoint, Provenance};
use arf_core::ArfError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    HashMismatch = 6,
    CheckpointMismatch = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArfModality {
    Image = 0,
    Text = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArfRetrievalMode {
    V2T = 0,
    V2V = 1,
    T2T = 2,
    T2V = 3,
}

/// Contrastive loss of one batch: the total and its two directions.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArfLoss {
    pub total: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// A loaded checkpoint.
pub struct ArfModel {
    checkpoint: Checkpoint,
}

/// A loaded candidate index.
pub struct ArfIndex {
    index: CandidateIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &ArfError) -> ArfStatus {
    match e {
        ArfError::DimensionMismatch { .. }
        | ArfError::ShapeMismatch(_)
        | ArfError::RowCountMismatch { .. } => ArfStatus::DimensionMismatch,
        ArfError::Io(_) => ArfStatus::Io,
        ArfError::BadMagic
        | ArfError::VersionUnsupported(_)
        | ArfError::MissingField(_)
        | ArfError::Malformed(_)
        | ArfError::Json(_) => ArfStatus::Format,
        ArfError::HashMismatch { .. } => ArfStatus::HashMismatch,
        ArfError::CheckpointMismatch { .. } => ArfStatus::CheckpointMismatch,
        _ => ArfStatus::InvalidArgument,
    }
}

enum Fail {
    Status(ArfStatus, String),
    Core(ArfError),
}

impl From<ArfError> for Fail {
    fn from(e: ArfError) -> Self {
        Fail::Core(e)
    }
}

fn null() -> Fail {
    Fail::Status(ArfStatus::NullPointer, "null pointer argument".into())
}

fn guard<F>(f: F) -> ArfStatus
where
    F: FnOnce() -> Result<(), Fail>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArfStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            ArfStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail::Status(ArfStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const ArfModel) -> Result<&'a ArfModel, Fail> {
    m.as_ref().ok_or_else(null)
}

fn mul(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail::Status(ArfStatus::InvalidArgument, "buffer size overflows".into()))
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn arf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn arf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads and verifies a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn arf_model_load(path: *const c_char, out: *mut *mut ArfModel) -> ArfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let checkpoint = read_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ArfModel { checkpoint }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn arf_model_save(model: *const ArfModel, path: *const c_char) -> ArfStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_checkpoint(path_arg(path)?, &m.checkpoint)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn arf_model_free(model: *mut ArfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Raw image width, raw text width and embedding width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn arf_model_dims(
    model: *const ArfModel,
    image_dim: *mut usize,
    text_dim: *mut usize,
    embed_dim: *mut usize,
) -> ArfStatus {
    guard(|| {
        let p = &model_ref(model)?.checkpoint.params;
        if image_dim.is_null() || text_dim.is_null() || embed_dim.is_null() {
            return Err(null());
        }
        *image_dim = p.input_dim(Modality::Image);
        *text_dim = p.input_dim(Modality::Text);
        *embed_dim = p.embed_dim();
        Ok(())
    })
}

/// Softmax temperature `exp(log_tau)`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn arf_model_tau(model: *const ArfModel, tau: *mut f64) -> ArfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if tau.is_null() {
            return Err(null());
        }
        *tau = m.checkpoint.params.tau();
        Ok(())
    })
}

/// Content hash of the checkpoint as a newly allocated string; release it
/// with [`arf_string_free`]. NULL on a NULL model.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn arf_model_checkpoint_id(model: *const ArfModel) -> *mut c_char {
    match model.as_ref() {
        Some(m) => CString::new(m.checkpoint.id()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn arf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn modality(m: ArfModality) -> Modality {
    match m {
        ArfModality::Image => Modality::Image,
        ArfModality::Text => Modality::Text,
    }
}

/// Unit embedding of one raw feature. `out_len` must be the embedding width.
///
/// # Safety
/// `input` must hold `input_len` values and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn arf_model_encode(
    model: *const ArfModel,
    which: ArfModality,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> ArfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let raw = slice_arg(input, input_len)?;
        let e = encode(&m.checkpoint.params, modality(which), raw)?;
        if out_len != e.dim() {
            return Err(Fail::Status(
                ArfStatus::BufferTooSmall,
                format!("output holds {out_len} values, embedding has {}", e.dim()),
            ));
        }
        slice_out(out, out_len)?.copy_from_slice(&e);
        Ok(())
    })
}

/// Zero-shot classification: `images` is `n_images × image_dim` raw image
/// features, `prompts` is `n_classes × text_dim` raw prompt features with
/// labels `class_ids`. Writes one class id per image.
///
/// # Safety
/// Every buffer must hold the number of elements its dimensions imply.
#[no_mangle]
pub unsafe extern "C" fn arf_model_classify(
    model: *const ArfModel,
    images: *const f64,
    n_images: usize,
    image_dim: usize,
    prompts: *const f64,
    n_classes: usize,
    text_dim: usize,
    class_ids: *const u32,
    predictions: *mut u32,
) -> ArfStatus {
    guard(|| {
        let p = &model_ref(model)?.checkpoint.params;
        let imgs = slice_arg(images, mul(n_images, image_dim)?)?;
        let prompt_rows = slice_arg(prompts, mul(n_classes, text_dim)?)?;
        let ids = slice_arg(class_ids, n_classes)?;
        let out = slice_out(predictions, n_images)?;
        let mut classifier = Matrix::zeros(n_classes, p.embed_dim());
        for c in 0..n_classes {
            let e = encode(
                p,
                Modality::Text,
                &prompt_rows[c * text_dim..(c + 1) * text_dim],
            )?;
            classifier.row_mut(c).copy_from_slice(&e);
        }
        let samples = (0..n_images)
            .map(|i| {
                Ok(arf_core::anchors::Sample {
                    id: i as u64,
                    feature: Vector::new(imgs[i * image_dim..(i + 1) * image_dim].to_vec())?,
                    class_id: 0,
                    domain_id: 0,
                })
            })
            .collect::<Result<Vec<_>, ArfError>>()?;
        out.copy_from_slice(&classify(p, &samples, &classifier, ids)?);
        Ok(())
    })
}

/// New model with parameters `(1 − alpha)·pre + alpha·ft`.
///
/// # Safety
/// Both models must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arf_model_ensemble(
    pre: *const ArfModel,
    ft: *const ArfModel,
    alpha: f64,
    out: *mut *mut ArfModel,
) -> ArfStatus {
    guard(|| {
        let (a, b) = (model_ref(pre)?, model_ref(ft)?);
        if out.is_null() {
            return Err(null());
        }
        let params = ensemble_weights(&a.checkpoint, &b.checkpoint, alpha)?;
        let fingerprint = format!(
            "ensemble:{}:{}:{alpha}",
            a.checkpoint.id(),
            b.checkpoint.id()
        );
        let checkpoint = Checkpoint::new(params, fingerprint, Provenance::Finetuned)?;
        *out = Box::into_raw(Box::new(ArfModel { checkpoint }));
        Ok(())
    })
}

/// Loads a candidate index file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn arf_index_load(path: *const c_char, out: *mut *mut ArfIndex) -> ArfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let index = read_index(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ArfIndex { index }));
        Ok(())
    })
}

/// Releases an index. NULL is ignored.
///
/// # Safety
/// `index` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn arf_index_free(index: *mut ArfIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of candidates; 0 for NULL.
///
/// # Safety
/// `index` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn arf_index_len(index: *const ArfIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Top-`k` candidates for one raw query feature (image for v2*, text for
/// t2*), best first; equal scores rank the lower candidate id first. The
/// model must be the checkpoint the index was built from.
///
/// # Safety
/// `query` must hold `query_len` values; `out_ids` and `out_scores` room
/// for `k` values each.
#[no_mangle]
pub unsafe extern "C" fn arf_index_retrieve(
    index: *const ArfIndex,
    model: *const ArfModel,
    mode: ArfRetrievalMode,
    query: *const f64,
    query_len: usize,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
) -> ArfStatus {
    guard(|| {
        let idx = index.as_ref().ok_or_else(null)?;
        let m = model_ref(model)?;
        let q = Vector::new(slice_arg(query, query_len)?.to_vec())?;
        let mode = match mode {
            ArfRetrievalMode::V2T => RetrievalMode::V2T,
            ArfRetrievalMode::V2V => RetrievalMode::V2V,
            ArfRetrievalMode::T2T => RetrievalMode::T2T,
            ArfRetrievalMode::T2V => RetrievalMode::T2V,
        };
        let hits = retrieve(&idx.index, &[(0, q)], &m.checkpoint, mode, k)?;
        let ids = slice_out(out_ids, k)?;
        let scores = slice_out(out_scores, k)?;
        for (i, h) in hits.iter().enumerate() {
            ids[i] = h.candidate_id;
            scores[i] = h.score;
        }
        Ok(())
    })
}

/// Bidirectional contrastive loss of `batch` matched pairs of unit
/// embeddings (`batch × dim`, row-major) at temperature `tau`.
///
/// # Safety
/// Both buffers must hold `batch · dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn arf_contrastive_loss(
    image_embeddings: *const f64,
    text_embeddings: *const f64,
    batch: usize,
    dim: usize,
    tau: f64,
    out: *mut ArfLoss,
) -> ArfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let n = mul(batch, dim)?;
        let f = Matrix::from_vec(batch, dim, slice_arg(image_embeddings, n)?.to_vec())?;
        let g = Matrix::from_vec(batch, dim, slice_arg(text_embeddings, n)?.to_vec())?;
        let l = contrastive_loss(&PairBatch::new(f, g)?, tau)?;
        *out = ArfLoss {
            total: l.total,
            image_to_text: l.image_to_text,
            text_to_image: l.text_to_image,
        };
        Ok(())
    })
}
