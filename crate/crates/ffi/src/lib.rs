//! C ABI over the `cacovid` library.
//!
//! Every fallible call returns a [`CacovidStatus`]. On failure a message is
//! kept per thread and can be read with [`cacovid_last_error`]. Objects are
//! handed out as opaque pointers and must be released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cacovid::bench::checked_flops_estimate;
use cacovid::diffcore::Tensor;
use cacovid::ocss::{exploration_log_space, sample_k, Sampler};
use cacovid::policy::{self, PolicyParams, TokenGrid};
use cacovid::retention::{compress, Strategy};
use cacovid::rng::StreamId;
use cacovid::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacovidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Checkpoint = 5,
    Io = 6,
    BufferTooSmall = 7,
    Overflow = 8,
    Panic = 9,
}

/// Budget allocation strategy used by [`cacovid_compress`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacovidStrategy {
    FrameAvg = 0,
    FrameAda = 1,
    FrameAdaSt = 2,
}

impl From<CacovidStrategy> for Strategy {
    fn from(s: CacovidStrategy) -> Self {
        match s {
            CacovidStrategy::FrameAvg => Strategy::FrameAvg,
            CacovidStrategy::FrameAda => Strategy::FrameAda,
            CacovidStrategy::FrameAdaSt => Strategy::FrameAdaST,
        }
    }
}

/// Borrowed view of one video and its question.
///
/// `video` holds `frames * height * width` rows and `question` holds `n_qst`
/// rows, each row `dim` doubles, row-major and frame-major.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CacovidGrid {
    pub video: *const f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub question: *const f64,
    pub n_qst: usize,
    pub dim: usize,
}

/// Search space sizes in bits.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CacovidExploration {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub subspaces: usize,
    pub log2_arbitrary: f64,
    pub log2_ocss: f64,
    pub reduction_ratio: f64,
}

/// Opaque policy handle.
pub struct CacovidPolicy {
    params: PolicyParams,
}

struct Failure {
    status: CacovidStatus,
    message: String,
}

impl Failure {
    fn new(status: CacovidStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => CacovidStatus::Shape,
            Error::NonFinite(_) => CacovidStatus::NonFinite,
            Error::Checkpoint(_) => CacovidStatus::Checkpoint,
            Error::Io(_) => CacovidStatus::Io,
            _ => CacovidStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

/// Runs `f`, records any failure and converts panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CacovidStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    let failure = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return CacovidStatus::Ok,
        Ok(Err(failure)) => failure,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Failure::new(CacovidStatus::Panic, format!("panic: {msg}"))
        }
    };
    set_last_error(&failure.message);
    failure.status
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(
            CacovidStatus::NullPointer,
            format!("`{name}` is null"),
        ))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    non_null(path, "path")?;
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::new(CacovidStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn policy_ref<'a>(policy: *const CacovidPolicy) -> Result<&'a CacovidPolicy, Failure> {
    non_null(policy, "policy")?;
    Ok(&*policy)
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn grid_arg(grid: *const CacovidGrid) -> Result<TokenGrid, Failure> {
    non_null(grid, "grid")?;
    let g = &*grid;
    non_null(g.video, "grid.video")?;
    non_null(g.question, "grid.question")?;
    let n_vid = g
        .frames
        .checked_mul(g.height)
        .and_then(|x| x.checked_mul(g.width))
        .ok_or_else(|| Failure::new(CacovidStatus::Overflow, "grid size overflows"))?;
    let video = std::slice::from_raw_parts(g.video, n_vid * g.dim).to_vec();
    let question = std::slice::from_raw_parts(g.question, g.n_qst * g.dim).to_vec();
    Ok(TokenGrid::new(
        Tensor::matrix(n_vid, g.dim, video)?,
        Tensor::matrix(g.n_qst, g.dim, question)?,
        g.frames,
        g.height,
        g.width,
    )?)
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cacovid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Freshly initialised policy for tokens of width `dim`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cacovid_policy_init(
    dim: usize,
    hidden: usize,
    seed: u64,
    out: *mut *mut CacovidPolicy,
) -> CacovidStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = PolicyParams::init(dim, hidden, seed)?;
        *out = Box::into_raw(Box::new(CacovidPolicy { params }));
        Ok(())
    })
}

/// Loads a checkpoint written by [`cacovid_policy_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cacovid_policy_load(
    path: *const c_char,
    out: *mut *mut CacovidPolicy,
) -> CacovidStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = PolicyParams::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CacovidPolicy { params }));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cacovid_policy_save(
    policy: *const CacovidPolicy,
    path: *const c_char,
) -> CacovidStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        p.params.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a policy. Null is ignored.
///
/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cacovid_policy_free(policy: *mut CacovidPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Token width the policy expects, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cacovid_policy_dim(policy: *const CacovidPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.params.dim())
}

/// Contribution scores: one per video token and one per frame.
///
/// # Safety
/// `token_scores` must hold `frames * height * width` doubles and
/// `frame_scores` must hold `frames` doubles.
#[no_mangle]
pub unsafe extern "C" fn cacovid_policy_score(
    policy: *const CacovidPolicy,
    grid: *const CacovidGrid,
    token_scores: *mut f64,
    frame_scores: *mut f64,
) -> CacovidStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        let grid = grid_arg(grid)?;
        let scores = policy::forward(&grid, &p.params)?;
        out_slice(token_scores, grid.n_vid(), "token_scores")?
            .copy_from_slice(&scores.token_scores);
        out_slice(frame_scores, grid.frames(), "frame_scores")?
            .copy_from_slice(&scores.frame_scores);
        Ok(())
    })
}

/// Keeps a `ratio` share of the video tokens.
///
/// Kept indices are written in increasing order to `indices`, which has room
/// for `capacity` entries; `written` receives the count. When `capacity` is
/// too small the call fails with `BufferTooSmall` and `written` still holds
/// the required size. `frame_budgets` may be null; otherwise it receives
/// `frames` entries.
///
/// # Safety
/// Pointers must be valid for the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn cacovid_compress(
    policy: *const CacovidPolicy,
    grid: *const CacovidGrid,
    ratio: f64,
    strategy: CacovidStrategy,
    indices: *mut usize,
    capacity: usize,
    written: *mut usize,
    frame_budgets: *mut usize,
) -> CacovidStatus {
    guard(|| {
        let p = policy_ref(policy)?;
        non_null(written, "written")?;
        let grid = grid_arg(grid)?;
        let c = compress(&grid, &p.params, ratio, strategy.into())?;
        *written = c.indices.len();
        if c.indices.len() > capacity {
            return Err(Failure::new(
                CacovidStatus::BufferTooSmall,
                format!("{} indices do not fit in {capacity}", c.indices.len()),
            ));
        }
        out_slice(indices, c.indices.len(), "indices")?.copy_from_slice(&c.indices);
        if !frame_budgets.is_null() {
            out_slice(frame_budgets, grid.frames(), "frame_budgets")?
                .copy_from_slice(&c.plan.per_frame_budget);
        }
        Ok(())
    })
}

/// One subspace-sampled draw of `k` of the `n` scored items.
///
/// Identical `(seed, stream)` pairs give identical draws.
///
/// # Safety
/// `scores` must hold `n` doubles and `indices` room for `k` entries.
#[no_mangle]
pub unsafe extern "C" fn cacovid_ocss_sample(
    scores: *const f64,
    n: usize,
    k: usize,
    lambda: f64,
    seed: u64,
    stream: u64,
    indices: *mut usize,
) -> CacovidStatus {
    guard(|| {
        non_null(scores, "scores")?;
        let scores = std::slice::from_raw_parts(scores, n);
        let draw = sample_k(
            Sampler::Ocss { lambda },
            scores,
            k,
            StreamId::new(seed, stream),
        )?;
        out_slice(indices, k, "indices")?.copy_from_slice(&draw.indices);
        Ok(())
    })
}

/// Prefill cost of `layers` decoder layers over `n` tokens of width `d` with
/// feed-forward width `m`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cacovid_flops(
    layers: u64,
    n: u64,
    d: u64,
    m: u64,
    out: *mut u64,
) -> CacovidStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = checked_flops_estimate(layers, n, d, m)
            .and_then(|f| u64::try_from(f).ok())
            .ok_or_else(|| Failure::new(CacovidStatus::Overflow, "FLOPs exceed 64 bits"))?;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cacovid_exploration_space(
    n: usize,
    k: usize,
    lambda: f64,
    out: *mut CacovidExploration,
) -> CacovidStatus {
    guard(|| {
        non_null(out, "out")?;
        let e = exploration_log_space(n, k, lambda)?;
        *out = CacovidExploration {
            n: e.n,
            k: e.k,
            m: e.m,
            subspaces: e.subspaces,
            log2_arbitrary: e.log2_arbitrary,
            log2_ocss: e.log2_ocss,
            reduction_ratio: e.reduction_ratio,
        };
        Ok(())
    })
}
