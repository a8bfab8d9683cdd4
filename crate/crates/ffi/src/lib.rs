//! C ABI over the `tessera` core.
//!
//! Every fallible call returns a [`TesseraStatus`]; on failure the message
//! is kept per thread and read back with [`tessera_last_error`]. Objects
//! cross the boundary as opaque handles that the caller releases with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tessera::diagnostics::seam_score;
use tessera::error::Error;
use tessera::material::{load_maps, save_maps, tile_maps, ConditionPattern, MapsMeta, MaterialSample};
use tessera::networks::Generator;
use tessera::render::{render, RenderSetup};
use tessera::tensor::Tensor;
use tessera::train::{load_generator, TrainSpec};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TesseraStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Contract = 3,
    MissingMap = 4,
    PatternRequired = 5,
    Config = 6,
    Schema = 7,
    NonFinite = 8,
    Image = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Generator loaded from a checkpoint.
pub struct TesseraGenerator {
    gen: Generator,
    spec: TrainSpec,
}

/// Material maps with their optional condition pattern.
pub struct TesseraMaterial {
    sample: MaterialSample,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TesseraGeneratorInfo {
    pub out_resolution: usize,
    pub out_channels: usize,
    pub pattern_channels: usize,
    pub latent_dim: usize,
    /// Nonzero when sampling needs a condition pattern.
    pub conditional: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TesseraStatus {
    match e {
        Error::Contract(_) => TesseraStatus::Contract,
        Error::MissingMap { .. } => TesseraStatus::MissingMap,
        Error::PatternRequired => TesseraStatus::PatternRequired,
        Error::Config { .. } | Error::Json(_) => TesseraStatus::Config,
        Error::Schema { .. } => TesseraStatus::Schema,
        Error::NonFinite(_) => TesseraStatus::NonFinite,
        Error::Image(_) => TesseraStatus::Image,
        Error::Io(_) => TesseraStatus::Io,
    }
}

struct Fail(TesseraStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(code: TesseraStatus, msg: impl Into<String>) -> Fail {
    Fail(code, msg.into())
}

/// Runs `f`, recording the message of any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TesseraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TesseraStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TesseraStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(TesseraStatus::NullArgument, format!("`{name}` is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TesseraStatus::InvalidArgument, format!("`{name}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(h: *const T, name: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| fail(TesseraStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(TesseraStatus::NullArgument, format!("`{name}` is null")))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tessera_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn tessera_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn tessera_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the generator (EMA weights when `use_ema` is nonzero) from a
/// training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tessera_generator_load(
    path: *const c_char,
    use_ema: u8,
    out: *mut *mut TesseraGenerator,
) -> TesseraStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (gen, spec) = load_generator(&path, use_ema != 0)?;
        *out = Box::into_raw(Box::new(TesseraGenerator { gen, spec }));
        Ok(())
    })
}

/// # Safety
/// `gen` must come from [`tessera_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tessera_generator_free(gen: *mut TesseraGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// # Safety
/// `gen` must be a live handle and `info` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tessera_generator_info(
    gen: *const TesseraGenerator,
    info: *mut TesseraGeneratorInfo,
) -> TesseraStatus {
    guard(|| {
        let g = &handle(gen, "gen")?.gen;
        *out_arg(info, "info")? = TesseraGeneratorInfo {
            out_resolution: g.cfg.out_resolution,
            out_channels: g.cfg.out_channels,
            pattern_channels: g.cfg.pattern_channels,
            latent_dim: g.cfg.latent_dim,
            conditional: g.cfg.conditional as u8,
        };
        Ok(())
    })
}

/// Samples one material. Conditional generators need `pattern`, a
/// `pattern_channels x resolution x resolution` array in `[0, 1]`, row-major;
/// unconditional ones take null and `resolution` 0 for the training size.
///
/// # Safety
/// `gen` must be a live handle, `pattern` null or readable for
/// `pattern_len` floats, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tessera_generator_sample(
    gen: *const TesseraGenerator,
    seed: u64,
    pattern: *const f32,
    pattern_len: usize,
    resolution: usize,
    out: *mut *mut TesseraMaterial,
) -> TesseraStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let h = handle(gen, "gen")?;
        let g = &h.gen;
        let pattern = if pattern.is_null() {
            None
        } else {
            let r = resolution;
            let c = g.cfg.pattern_channels;
            if r == 0 || pattern_len != c * r * r {
                return Err(fail(
                    TesseraStatus::InvalidArgument,
                    format!("pattern needs {c} x {r} x {r} floats, got {pattern_len}"),
                ));
            }
            let data = std::slice::from_raw_parts(pattern, pattern_len).to_vec();
            Some(ConditionPattern::new(Tensor::new(&[c, r, r], data)?)?)
        };
        if g.cfg.conditional && pattern.is_none() {
            return Err(Error::PatternRequired.into());
        }
        let domain = match (&pattern, resolution) {
            (Some(p), _) => p.resolution(),
            (None, 0) => g.cfg.out_resolution,
            (None, r) => r,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = g.bundle_from_z(g.sample_z(&mut rng), domain, &mut rng)?;
        let maps = g.synthesize(&b, pattern.as_ref())?;
        let class = &h.spec.class;
        let meta = MapsMeta::for_maps(class.class, class.amplitude, &maps);
        let sample = MaterialSample { maps, pattern, meta };
        *out = Box::into_raw(Box::new(TesseraMaterial { sample }));
        Ok(())
    })
}

/// Reads a material directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_load(dir: *const c_char, out: *mut *mut TesseraMaterial) -> TesseraStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let sample = load_maps(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(TesseraMaterial { sample }));
        Ok(())
    })
}

/// Writes the maps, pattern and metadata as a material directory.
///
/// # Safety
/// `mat` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_save(mat: *const TesseraMaterial, dir: *const c_char) -> TesseraStatus {
    guard(|| {
        let m = handle(mat, "mat")?;
        save_maps(&m.sample, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `mat` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_free(mat: *mut TesseraMaterial) {
    if !mat.is_null() {
        drop(Box::from_raw(mat));
    }
}

/// Channel count and spatial size of the maps.
///
/// # Safety
/// `mat` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_shape(
    mat: *const TesseraMaterial,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> TesseraStatus {
    guard(|| {
        let m = &handle(mat, "mat")?.sample.maps;
        let (h, w) = m.size();
        *out_arg(channels, "channels")? = m.channels();
        *out_arg(height, "height")? = h;
        *out_arg(width, "width")? = w;
        Ok(())
    })
}

/// Copies the maps, channel-major, into `buf` of `len` floats.
///
/// # Safety
/// `mat` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_copy_maps(
    mat: *const TesseraMaterial,
    buf: *mut f32,
    len: usize,
) -> TesseraStatus {
    guard(|| {
        let data = handle(mat, "mat")?.sample.maps.tensor().data();
        copy_out(data, buf, len)
    })
}

unsafe fn copy_out(data: &[f32], buf: *mut f32, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(fail(TesseraStatus::NullArgument, "`buf` is null"));
    }
    if len < data.len() {
        return Err(fail(TesseraStatus::BufferTooSmall, format!("need {} floats, got {len}", data.len())));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

/// Repeats the maps `nx` by `ny` times into a new handle.
///
/// # Safety
/// `mat` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_tile(
    mat: *const TesseraMaterial,
    nx: usize,
    ny: usize,
    out: *mut *mut TesseraMaterial,
) -> TesseraStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let s = &handle(mat, "mat")?.sample;
        let maps = tile_maps(&s.maps, nx, ny)?;
        let meta = MapsMeta::for_maps(s.meta.class, s.meta.amplitude, &maps);
        let sample = MaterialSample { maps, pattern: None, meta };
        *out = Box::into_raw(Box::new(TesseraMaterial { sample }));
        Ok(())
    })
}

/// Mean absolute jump across the wrap edges over the mean absolute jump
/// between interior neighbors; near 1 for tileable maps.
///
/// # Safety
/// `mat` must be a live handle and `score` writable.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_seam_score(mat: *const TesseraMaterial, score: *mut f64) -> TesseraStatus {
    guard(|| {
        let m = handle(mat, "mat")?;
        *out_arg(score, "score")? = seam_score(m.sample.maps.tensor())?;
        Ok(())
    })
}

/// Renders the maps under the default flash into `buf`, an RGB
/// `3 x H x W` array of `len` floats in `[0, 1]`.
///
/// # Safety
/// `mat` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn tessera_material_render(mat: *const TesseraMaterial, buf: *mut f32, len: usize) -> TesseraStatus {
    guard(|| {
        let s = &handle(mat, "mat")?.sample;
        let (h, w) = s.maps.size();
        if h != w {
            return Err(fail(TesseraStatus::Contract, format!("the flash renderer needs square maps, got {h}x{w}")));
        }
        let setup = RenderSetup { amplitude: s.meta.amplitude, ..RenderSetup::new(h) };
        let img = render(&s.maps, &setup)?;
        copy_out(img.data(), buf, len)
    })
}
