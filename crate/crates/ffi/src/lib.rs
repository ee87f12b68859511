//! C ABI for loading a trained model, embedding images and scoring
//! rankings.
//!
//! Every function returns a [`DgStatus`]; on failure a message is kept per
//! thread and can be read with [`dg_last_error`]. Model handles are opaque
//! and must be released with [`dg_model_free`]. Array arguments are plain
//! row-major buffers whose lengths are passed explicitly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use dgreid::data::{preprocess_rgb, PreprocessConfig};
use dgreid::eval::{compute_cmc, rank_gallery, EmbeddingMatrix};
use dgreid::losses::{batch_hard_triplet_loss, consistency_loss};
use dgreid::model::checkpoint::Archive;
use dgreid::model::GlobalModel;
use dgreid::tensor::Tensor;
use dgreid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    Shape = 6,
    Io = 7,
    Panic = 8,
}

/// Loaded global model (extractor and encoder) plus its input geometry.
pub struct DgModel {
    model: GlobalModel,
    preprocess: PreprocessConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DgStatus {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => DgStatus::InvalidArgument,
        Error::ManifestParse { .. } | Error::MissingImage(_) | Error::Validation(_) | Error::Image { .. } => DgStatus::Data,
        Error::Numeric(_) => DgStatus::Numeric,
        Error::Checkpoint { .. } => DgStatus::Checkpoint,
        Error::Shape(_) => DgStatus::Shape,
        Error::Io { .. } => DgStatus::Io,
    }
}

struct Fail(DgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DgStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DgStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            DgStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn checked_mul(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(DgStatus::InvalidArgument, "buffer size overflows".into()))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got == want {
        Ok(())
    } else {
        Err(Fail(DgStatus::Shape, format!("{what} has length {got}, expected {want}")))
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a stage-2 checkpoint. Images passed to [`dg_model_embed_rgb8`] are
/// resized to the backbone input and normalized with the default channel
/// statistics.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_model_load(path: *const c_char, out: *mut *mut DgModel) -> DgStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(DgStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let archive = Archive::load(Path::new(p))?;
        let model = GlobalModel::from_archive(&archive, None, Path::new(p))?;
        let (height, width) = model.config.backbone.input_hw();
        let handle = Box::new(DgModel {
            model,
            preprocess: PreprocessConfig {
                height,
                width,
                ..PreprocessConfig::default()
            },
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_model_free(model: *mut DgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width and expected input height/width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dg_model_info(
    model: *const DgModel,
    embedding_dim: *mut usize,
    input_height: *mut usize,
    input_width: *mut usize,
) -> DgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if embedding_dim.is_null() || input_height.is_null() || input_width.is_null() {
            return Err(null("output"));
        }
        *embedding_dim = m.model.encoder.d_emb();
        *input_height = m.preprocess.height;
        *input_width = m.preprocess.width;
        Ok(())
    })
}

/// Embed `n` preprocessed images laid out as `[n, 3, H, W]` doubles into
/// `out` (`n × embedding_dim`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dg_model_embed(
    model: *const DgModel,
    images: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> DgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (h, w) = (m.preprocess.height, m.preprocess.width);
        let input = slice_in(images, checked_mul(checked_mul(n, 3)?, h * w)?, "images")?;
        let out = slice_out(out, out_len, "out")?;
        expect_len(out_len, checked_mul(n, m.model.encoder.d_emb())?, "out")?;
        if n == 0 {
            return Ok(());
        }
        let x = Tensor::from_vec(&[n, 3, h, w], input.to_vec())?;
        out.copy_from_slice(m.model.embed(&x)?.data());
        Ok(())
    })
}

/// Embed `n` 8-bit RGB images of `height × width` pixels (interleaved,
/// row-major, one image after another).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dg_model_embed_rgb8(
    model: *const DgModel,
    pixels: *const u8,
    n: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> DgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height == 0 || width == 0 || height > u32::MAX as usize || width > u32::MAX as usize {
            return Err(Fail(DgStatus::InvalidArgument, "image size out of range".into()));
        }
        let per = checked_mul(checked_mul(height, width)?, 3)?;
        let input = slice_in(pixels, checked_mul(n, per)?, "pixels")?;
        let out = slice_out(out, out_len, "out")?;
        expect_len(out_len, checked_mul(n, m.model.encoder.d_emb())?, "out")?;
        if n == 0 {
            return Ok(());
        }
        let mut parts = Vec::with_capacity(n);
        for chunk in input.chunks_exact(per) {
            let img = image::RgbImage::from_raw(width as u32, height as u32, chunk.to_vec())
                .ok_or_else(|| Fail(DgStatus::Shape, "pixel buffer does not match size".into()))?;
            let t = preprocess_rgb(&img, &m.preprocess);
            parts.push(t.reshape(&[1, 3, m.preprocess.height, m.preprocess.width])?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let x = Tensor::concat_batch(&refs)?;
        out.copy_from_slice(m.model.embed(&x)?.data());
        Ok(())
    })
}

/// Order gallery rows (`rows × dim`) by Euclidean distance to `probe`;
/// ties keep the lower index first. Writes `rows` indices to `order`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dg_rank_gallery(
    probe: *const f64,
    dim: usize,
    gallery: *const f64,
    rows: usize,
    order: *mut usize,
) -> DgStatus {
    guard(|| {
        let p = slice_in(probe, dim, "probe")?;
        let g = slice_in(gallery, checked_mul(rows, dim)?, "gallery")?;
        let o = slice_out(order, rows, "order")?;
        let mat = EmbeddingMatrix::new(dim, g.to_vec(), vec![0; rows], vec![0; rows])?;
        o.copy_from_slice(&rank_gallery(p, &mat)?);
        Ok(())
    })
}

/// CMC curve from ranked gallery identities (`n_probes × gallery_len`,
/// one row per probe) and the probe identities. Writes `gallery_len` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dg_cmc(
    ranked_ids: *const usize,
    n_probes: usize,
    gallery_len: usize,
    probe_ids: *const usize,
    curve: *mut f64,
) -> DgStatus {
    guard(|| {
        let r = slice_in(ranked_ids, checked_mul(n_probes, gallery_len)?, "ranked_ids")?;
        let p = slice_in(probe_ids, n_probes, "probe_ids")?;
        let out = slice_out(curve, gallery_len, "curve")?;
        if gallery_len == 0 {
            return Err(Fail(DgStatus::InvalidArgument, "empty gallery".into()));
        }
        let rankings: Vec<Vec<usize>> = r.chunks_exact(gallery_len).map(<[usize]>::to_vec).collect();
        out.copy_from_slice(&compute_cmc(&rankings, p)?);
        Ok(())
    })
}

/// Mean row-wise Euclidean distance between two `n × dim` batches.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dg_consistency_loss(v_j: *const f64, v_k: *const f64, n: usize, dim: usize, out: *mut f64) -> DgStatus {
    guard(|| {
        let len = checked_mul(n, dim)?;
        let a = Tensor::from_vec(&[n, dim], slice_in(v_j, len, "v_j")?.to_vec())?;
        let b = Tensor::from_vec(&[n, dim], slice_in(v_k, len, "v_k")?.to_vec())?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = consistency_loss(&a, &b)?;
        Ok(())
    })
}

/// Batch-hard triplet loss over `n × dim` embeddings with integer labels.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dg_triplet_loss(
    embeddings: *const f64,
    labels: *const usize,
    n: usize,
    dim: usize,
    margin: f64,
    out: *mut f64,
) -> DgStatus {
    guard(|| {
        let e = Tensor::from_vec(&[n, dim], slice_in(embeddings, checked_mul(n, dim)?, "embeddings")?.to_vec())?;
        let l = slice_in(labels, n, "labels")?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        if !(margin.is_finite() && margin > 0.0) {
            return Err(Fail(DgStatus::InvalidArgument, "margin must be positive".into()));
        }
        *o = batch_hard_triplet_loss(&e, l, margin)?;
        Ok(())
    })
}
