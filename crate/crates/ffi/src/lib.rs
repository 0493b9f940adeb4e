//! C ABI over the dlmwpo core.
//!
//! Every fallible entry point returns a [`DlmwpoStatus`]; on failure the
//! message is available from [`dlmwpo_last_error`] on the same thread.
//! Models are opaque heap handles released with [`dlmwpo_model_free`].
//! Panics never cross the boundary; they surface as `DLMWPO_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dlmwpo::diffcore::{Checkpoint, DenoiserConfig};
use dlmwpo::diffusion::{Denoiser, Vocab};
use dlmwpo::policy_opt::{group_advantage, wd1_weights};
use dlmwpo::sampler::{generate, Remasking, SampleConfig};
use dlmwpo::tasks::{DatasetRecord, Instance};
use dlmwpo::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlmwpoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    Capability = 7,
    Domain = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque model handle.
pub struct DlmwpoModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DlmwpoStatus {
    match e {
        Error::Input(_) | Error::Json(_) | Error::Generation(_) => DlmwpoStatus::InvalidArgument,
        Error::Numeric { .. } => DlmwpoStatus::Numeric,
        Error::Config(_) => DlmwpoStatus::Config,
        Error::Capability(_) => DlmwpoStatus::Capability,
        Error::Domain(_) => DlmwpoStatus::Domain,
        Error::Checkpoint(_) => DlmwpoStatus::Checkpoint,
        Error::Io { .. } => DlmwpoStatus::Io,
    }
}

struct Fail(DlmwpoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DlmwpoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DlmwpoStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DlmwpoStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DlmwpoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            DlmwpoStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dlmwpo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dlmwpo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Group-relative advantages `r_i - mean(r)`; `out` holds `n` values.
///
/// # Safety
/// `rewards` and `out` must point to `n` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_group_advantage(
    rewards: *const f64,
    n: usize,
    out: *mut f64,
) -> DlmwpoStatus {
    guard(|| {
        let r = slice_arg(rewards, n, "rewards")?;
        let o = slice_out(out, n, "out")?;
        o.copy_from_slice(&group_advantage(r)?);
        Ok(())
    })
}

/// Positive and negative group weights `softmax(±ψ·A)`.
///
/// # Safety
/// `advantages`, `w_pos` and `w_neg` must point to `n` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_wd1_weights(
    advantages: *const f64,
    n: usize,
    psi: f64,
    w_pos: *mut f64,
    w_neg: *mut f64,
) -> DlmwpoStatus {
    guard(|| {
        let a = slice_arg(advantages, n, "advantages")?;
        let wp = slice_out(w_pos, n, "w_pos")?;
        let wn = slice_out(w_neg, n, "w_neg")?;
        let (p, m) = wd1_weights(a, psi)?;
        wp.copy_from_slice(&p);
        wn.copy_from_slice(&m);
        Ok(())
    })
}

/// Scores `completion` against one dataset record (a JSONL line as written
/// by `gen-data`). Writes the total reward.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_total` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_reward(
    record_json: *const c_char,
    completion: *const c_char,
    out_total: *mut f64,
) -> DlmwpoStatus {
    guard(|| {
        let rec: DatasetRecord =
            serde_json::from_str(str_arg(record_json, "record_json")?).map_err(Error::from)?;
        let inst = Instance::from_record(&rec)?;
        let text = str_arg(completion, "completion")?;
        if out_total.is_null() {
            return Err(null("out_total"));
        }
        *out_total = inst.reward(text).total;
        Ok(())
    })
}

/// Loads a checkpoint file into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_model_load(
    path: *const c_char,
    out: *mut *mut DlmwpoModel,
) -> DlmwpoStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(DlmwpoModel { ckpt }));
        Ok(())
    })
}

/// Freshly initialized model over the character vocabulary.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_model_init(
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_ff: usize,
    max_len: usize,
    seed: u64,
    out: *mut *mut DlmwpoModel,
) -> DlmwpoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = DenoiserConfig {
            vocab_size: Vocab::char_level().size(),
            max_len,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            ..DenoiserConfig::default()
        };
        cfg.validate()?;
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
        *out = Box::into_raw(Box::new(DlmwpoModel {
            ckpt: Checkpoint {
                model: cfg,
                params,
                step: 0,
                config_hash: String::new(),
            },
        }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_model_save(
    model: *const DlmwpoModel,
    path: *const c_char,
) -> DlmwpoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.ckpt.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_model_num_params(model: *const DlmwpoModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.params.num_scalars())
}

/// Generates a completion for `prompt` and writes it NUL-terminated into
/// `buf`. `temperature` 0 is greedy. On `DLMWPO_STATUS_BUFFER_TOO_SMALL`,
/// `written` holds the required size including the NUL.
///
/// # Safety
/// `model` must come from this library, `prompt` must be NUL-terminated,
/// `buf` must hold `buf_len` bytes and `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_model_generate(
    model: *const DlmwpoModel,
    prompt: *const c_char,
    gen_length: usize,
    diffusion_steps: usize,
    block_length: usize,
    temperature: f64,
    seed: u64,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> DlmwpoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if written.is_null() {
            return Err(null("written"));
        }
        let vocab = Vocab::char_level();
        let ids = vocab.encode(str_arg(prompt, "prompt")?)?;
        let cfg = SampleConfig {
            gen_length,
            diffusion_steps,
            block_length,
            remasking: Remasking::LowConfidence,
            temperature,
            lambda: 1.0,
            beta: 0.0,
            unnormalized_mixture: false,
        };
        let den = Denoiser::new(&m.ckpt.model, &m.ckpt.params);
        let g = generate(
            den,
            None,
            &ids,
            vocab.mask_id,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        let text = vocab.decode(&g.completion);
        let need = text.len() + 1;
        *written = need;
        if buf_len < need {
            return Err(Fail(
                DlmwpoStatus::BufferTooSmall,
                format!("completion needs {need} bytes, buffer has {buf_len}"),
            ));
        }
        let out = slice_out(buf.cast::<u8>(), buf_len, "buf")?;
        out[..text.len()].copy_from_slice(text.as_bytes());
        out[text.len()] = 0;
        Ok(())
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dlmwpo_model_free(model: *mut DlmwpoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
