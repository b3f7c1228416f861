//! C ABI for the lsic recommender.
//!
//! Every function returns an `LsicStatus`. On failure a message is kept per
//! thread and can be read with `lsic_last_error` until the next call on that
//! thread. Handles are opaque and must be released with their `_free`
//! function; freeing a null handle is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lsic::adversarial::normalize_rewards;
use lsic::config::RunConfig;
use lsic::eval::{mean_average_precision, mean_reciprocal_rank, ndcg_at_n, precision_at_n, RankedList};
use lsic::pipeline::{self, Prepared, Trained};
use lsic::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    InvalidArgument = 6,
    Checkpoint = 7,
    Training = 8,
    Internal = 9,
}

pub struct LsicConfig(RunConfig);

pub struct LsicData(Prepared);

pub struct LsicModel {
    trained: Trained,
    users: usize,
    movies: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LsicStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => LsicStatus::Io,
            Error::Parse { .. } | Error::Empty(_) | Error::Format(_) => LsicStatus::Parse,
            Error::Config(_) | Error::Split(_) => LsicStatus::Config,
            Error::InvalidArgument(_) => LsicStatus::InvalidArgument,
            Error::Checkpoint(_) => LsicStatus::Checkpoint,
            Error::NonFinite(_) | Error::Diverged(_) => LsicStatus::Training,
            Error::Shape(_) | Error::Index(_) | Error::Contract(_) => LsicStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn null(what: &str) -> Failure {
    Failure(LsicStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(LsicStatus::InvalidArgument, msg)
}

fn guard(f: impl FnOnce() -> Outcome) -> LsicStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsicStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LsicStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(LsicStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> std::result::Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> std::result::Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<T>(out: *mut T, value: T, what: &str) -> Outcome {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn handle_out<T>(out: *mut *mut T, make: impl FnOnce() -> std::result::Result<T, Failure>) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(ptr::null_mut());
    let value = make()?;
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn lsic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// A configuration with every key at its default.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsic_config_new(out: *mut *mut LsicConfig) -> LsicStatus {
    guard(|| handle_out(out, || Ok(LsicConfig(RunConfig::default()))))
}

/// Reads a `key = value` configuration file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsic_config_load(path: *const c_char, out: *mut *mut LsicConfig) -> LsicStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        handle_out(out, || Ok(LsicConfig(RunConfig::load(Path::new(path))?)))
    })
}

/// Sets one key; the configuration is revalidated afterwards.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn lsic_config_set(cfg: *mut LsicConfig, key: *const c_char, value: *const c_char) -> LsicStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsic_config_free(cfg: *mut LsicConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Parses, labels, splits and sessionizes the configured data.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsic_data_load(cfg: *const LsicConfig, out: *mut *mut LsicData) -> LsicStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        handle_out(out, || Ok(LsicData(Prepared::load(&cfg.0)?)))
    })
}

/// Numbers of users, movies and ratings; any output may be null.
///
/// # Safety
/// `data` must come from this library; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsic_data_counts(data: *const LsicData, users: *mut usize, movies: *mut usize, ratings: *mut usize) -> LsicStatus {
    guard(|| {
        let ds = ref_arg(data, "data")?.0.dataset();
        for (p, v) in [(users, ds.num_users), (movies, ds.num_movies), (ratings, ds.len())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `data` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsic_data_free(data: *mut LsicData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

fn model(trained: Trained, data: &Prepared) -> LsicModel {
    LsicModel { trained, users: data.dataset().num_users, movies: data.dataset().num_movies }
}

/// Runs the full training pipeline, writing outputs under the configured `out_dir`.
///
/// # Safety
/// `cfg` and `data` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsic_model_train(cfg: *const LsicConfig, data: *const LsicData, out: *mut *mut LsicModel) -> LsicStatus {
    guard(|| {
        let (cfg, data) = (ref_arg(cfg, "cfg")?, ref_arg(data, "data")?);
        handle_out(out, || Ok(model(pipeline::cmd_train(&cfg.0, &data.0, None)?, &data.0)))
    })
}

/// Loads a checkpoint written for `data`.
///
/// # Safety
/// `cfg` and `data` must come from this library, `path` must be nul-terminated
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsic_model_load(
    cfg: *const LsicConfig,
    data: *const LsicData,
    path: *const c_char,
    out: *mut *mut LsicModel,
) -> LsicStatus {
    guard(|| {
        let (cfg, data, path) = (ref_arg(cfg, "cfg")?, ref_arg(data, "data")?, str_arg(path, "path")?);
        handle_out(out, || Ok(model(Trained::load(Path::new(path), &cfg.0, &data.0)?, &data.0)))
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsic_model_free(model: *mut LsicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Up to `n` recommendations for raw user id `user`, best first.
///
/// Fills `movies[..*written]` with raw movie ids and `scores[..*written]` with
/// probabilities; both arrays must hold `n` elements.
///
/// # Safety
/// `model` and `data` must come from this library; the arrays must have room
/// for `n` elements and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsic_recommend(
    model: *const LsicModel,
    data: *const LsicData,
    user: i64,
    n: usize,
    movies: *mut i64,
    scores: *mut f64,
    written: *mut usize,
) -> LsicStatus {
    guard(|| {
        let (model, data) = (ref_arg(model, "model")?, ref_arg(data, "data")?);
        out_arg(written, 0, "written")?;
        let ds = data.0.dataset();
        if (model.users, model.movies) != (ds.num_users, ds.num_movies) {
            return Err(invalid(format!(
                "model is for {} users x {} movies, data has {} x {}",
                model.users, model.movies, ds.num_users, ds.num_movies
            )));
        }
        if n > 0 && (movies.is_null() || scores.is_null()) {
            return Err(null("movies or scores"));
        }
        let recs = pipeline::recommend(&data.0, &model.trained, user, n)?;
        for (i, (m, s)) in recs.iter().enumerate() {
            movies.add(i).write(*m);
            scores.add(i).write(*s);
        }
        written.write(recs.len());
        Ok(())
    })
}

unsafe fn list(relevant: *const bool, len: usize, total_relevant: usize) -> std::result::Result<RankedList, Failure> {
    let flags = slice_arg(relevant, len, "relevant")?;
    let hits = flags.iter().filter(|&&r| r).count();
    if total_relevant < hits {
        return Err(invalid(format!("total_relevant {total_relevant} is below the {hits} relevant entries")));
    }
    Ok(RankedList::from_flags(flags, total_relevant))
}

/// Precision at cutoff `n` of a ranked list given as relevance flags.
///
/// # Safety
/// `relevant` must hold `len` elements and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lsic_precision_at_n(relevant: *const bool, len: usize, n: usize, out: *mut f64) -> LsicStatus {
    guard(|| {
        let l = list(relevant, len, len)?;
        out_arg(out, precision_at_n(&l, n)?, "out")
    })
}

/// NDCG at cutoff `n`; `total_relevant` counts relevant items inside and outside the list.
///
/// # Safety
/// `relevant` must hold `len` elements and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lsic_ndcg_at_n(relevant: *const bool, len: usize, total_relevant: usize, n: usize, out: *mut f64) -> LsicStatus {
    guard(|| {
        let l = list(relevant, len, total_relevant)?;
        out_arg(out, ndcg_at_n(&l, n)?, "out")
    })
}

/// Average precision over the whole list.
///
/// # Safety
/// `relevant` must hold `len` elements and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lsic_average_precision(relevant: *const bool, len: usize, total_relevant: usize, out: *mut f64) -> LsicStatus {
    guard(|| {
        let l = list(relevant, len, total_relevant)?;
        out_arg(out, mean_average_precision(&l), "out")
    })
}

/// Reciprocal rank of the first relevant entry, 0 when there is none.
///
/// # Safety
/// `relevant` must hold `len` elements and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lsic_reciprocal_rank(relevant: *const bool, len: usize, out: *mut f64) -> LsicStatus {
    guard(|| {
        let l = list(relevant, len, len)?;
        out_arg(out, mean_reciprocal_rank(&l), "out")
    })
}

/// Standardizes `rewards` into `out` (both of length `len`; they may alias).
///
/// # Safety
/// Both arrays must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn lsic_normalize_rewards(rewards: *const f64, len: usize, out: *mut f64) -> LsicStatus {
    guard(|| {
        let r = slice_arg(rewards, len, "rewards")?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(invalid("rewards must be finite".into()));
        }
        let z = normalize_rewards(r);
        if len > 0 && out.is_null() {
            return Err(null("out"));
        }
        for (i, v) in z.into_iter().enumerate() {
            out.add(i).write(v);
        }
        Ok(())
    })
}
