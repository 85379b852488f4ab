//! C ABI over `glimpse-core`.
//!
//! Handles are opaque and owned by the caller once returned; release them with
//! the matching `*_free`. Every function returns a [`GlimpseStatus`]; on
//! failure [`glimpse_last_error`] describes the problem for the calling thread.
//! Array getters follow one convention: pass `buf = NULL` to learn the length
//! through `*len_out`, then call again with a buffer at least that long.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use glimpse::baselines::{baseline_map, BaselineKind};
use glimpse::grid::Grid;
use glimpse::metrics::{nss, spearman};
use glimpse::trace::{load_trace, save_trace, synth_trace, validate_trace, SynthSpec, TraceBundle};
use glimpse::{EngineConfig, Error, Explanation, TokenConfig, UpdateRule};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlimpseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MissingFile = 3,
    ShapeMismatch = 4,
    CorruptManifest = 5,
    VersionUnsupported = 6,
    InvalidSpec = 7,
    Degenerate = 8,
    InvalidK = 9,
    Oracle = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for GlimpseStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::MissingFile(_) => GlimpseStatus::MissingFile,
            Error::ShapeMismatch(_) => GlimpseStatus::ShapeMismatch,
            Error::CorruptManifest { .. } => GlimpseStatus::CorruptManifest,
            Error::VersionUnsupported { .. } => GlimpseStatus::VersionUnsupported,
            Error::InvalidSpec(_) => GlimpseStatus::InvalidSpec,
            Error::InvalidArgument(_) => GlimpseStatus::InvalidArgument,
            Error::DegenerateSaliency | Error::DegenerateInput(_) => GlimpseStatus::Degenerate,
            Error::InvalidK { .. } => GlimpseStatus::InvalidK,
            Error::OracleUnavailable(_) | Error::OracleMalformed(_) => GlimpseStatus::Oracle,
            Error::Io { .. } => GlimpseStatus::Io,
        }
    }
}

/// A loaded or synthesized trace bundle.
pub struct GlimpseTrace {
    inner: TraceBundle,
}

/// Saliency outputs for one trace.
pub struct GlimpseExplanation {
    inner: Explanation,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlimpseDims {
    pub layers: usize,
    pub heads: usize,
    pub visual: usize,
    pub prompt: usize,
    pub generated: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Engine and token-weighting settings. Start from [`glimpse_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlimpseConfig {
    pub fusion_temperature: f64,
    pub depth_temperature: f64,
    pub layer_fraction: f64,
    pub use_depth_prior: bool,
    pub use_layer_relevance: bool,
    pub use_head_weighting: bool,
    /// Use `R + (I + aE)R` instead of the additive `R + aER` update.
    pub literal_update: bool,
    pub use_token_confidence: bool,
    pub use_prompt_weighting: bool,
    pub flow_strength: f64,
    pub apply_flow: bool,
    pub flow_all_pairs: bool,
    pub drop_punctuation: bool,
}

impl GlimpseConfig {
    fn split(&self) -> (EngineConfig, TokenConfig) {
        let engine = EngineConfig {
            fusion_temperature: self.fusion_temperature,
            depth_temperature: self.depth_temperature,
            layer_fraction: self.layer_fraction,
            use_depth_prior: self.use_depth_prior,
            use_layer_relevance: self.use_layer_relevance,
            use_head_weighting: self.use_head_weighting,
            update_rule: if self.literal_update {
                UpdateRule::Literal
            } else {
                UpdateRule::Additive
            },
        };
        let tokens = TokenConfig {
            use_token_confidence: self.use_token_confidence,
            use_prompt_weighting: self.use_prompt_weighting,
            flow_strength: self.flow_strength,
            flow_all_pairs: self.flow_all_pairs,
            apply_flow: self.apply_flow,
            drop_punctuation: self.drop_punctuation,
        };
        (engine, tokens)
    }
}

impl Default for GlimpseConfig {
    fn default() -> Self {
        let e = EngineConfig::default();
        let t = TokenConfig::default();
        GlimpseConfig {
            fusion_temperature: e.fusion_temperature,
            depth_temperature: e.depth_temperature,
            layer_fraction: e.layer_fraction,
            use_depth_prior: e.use_depth_prior,
            use_layer_relevance: e.use_layer_relevance,
            use_head_weighting: e.use_head_weighting,
            literal_update: e.update_rule == UpdateRule::Literal,
            use_token_confidence: t.use_token_confidence,
            use_prompt_weighting: t.use_prompt_weighting,
            flow_strength: t.flow_strength,
            apply_flow: t.apply_flow,
            flow_all_pairs: t.flow_all_pairs,
            drop_punctuation: t.drop_punctuation,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: GlimpseStatus, msg: impl Into<String>) -> GlimpseStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> GlimpseStatus {
    fail(GlimpseStatus::from(&e), e.to_string())
}

/// Runs `f`, turning panics into `Panic` and clearing the error on success.
fn guard(f: impl FnOnce() -> GlimpseStatus) -> GlimpseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(GlimpseStatus::Ok) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GlimpseStatus::Ok
        }
        Ok(status) => status,
        Err(_) => fail(GlimpseStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GlimpseStatus> {
    if p.is_null() {
        return Err(fail(GlimpseStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GlimpseStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies `data` into `buf` (or just reports the length when `buf` is NULL).
unsafe fn copy_out(data: &[f64], buf: *mut f64, cap: usize, len_out: *mut usize) -> GlimpseStatus {
    if len_out.is_null() {
        return fail(GlimpseStatus::NullPointer, "len_out is NULL");
    }
    *len_out = data.len();
    if buf.is_null() {
        return GlimpseStatus::Ok;
    }
    if cap < data.len() {
        return fail(
            GlimpseStatus::BufferTooSmall,
            format!("buffer holds {cap} values, need {}", data.len()),
        );
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    GlimpseStatus::Ok
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(GlimpseStatus::NullPointer, concat!(stringify!($p), " is NULL"));
        })+
    };
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn glimpse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn glimpse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn glimpse_config_default(out: *mut GlimpseConfig) -> GlimpseStatus {
    guard(|| {
        non_null!(out);
        *out = GlimpseConfig::default();
        GlimpseStatus::Ok
    })
}

/// Loads the trace directory `dir` (containing `manifest.json`).
#[no_mangle]
pub unsafe extern "C" fn glimpse_trace_load(dir: *const c_char, out: *mut *mut GlimpseTrace) -> GlimpseStatus {
    guard(|| {
        non_null!(out);
        let dir = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match load_trace(PathBuf::from(dir)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GlimpseTrace { inner }));
                GlimpseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Builds a synthetic trace from a JSON synthesis spec.
#[no_mangle]
pub unsafe extern "C" fn glimpse_trace_synth(spec_json: *const c_char, out: *mut *mut GlimpseTrace) -> GlimpseStatus {
    guard(|| {
        non_null!(out);
        let text = match str_arg(spec_json, "spec_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: SynthSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(GlimpseStatus::InvalidSpec, format!("bad spec: {e}")),
        };
        match synth_trace(&spec) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GlimpseTrace { inner }));
                GlimpseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn glimpse_trace_save(trace: *const GlimpseTrace, dir: *const c_char) -> GlimpseStatus {
    guard(|| {
        non_null!(trace);
        let dir = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match save_trace(&(*trace).inner, PathBuf::from(dir)) {
            Ok(()) => GlimpseStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Frees a trace. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn glimpse_trace_free(trace: *mut GlimpseTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

#[no_mangle]
pub unsafe extern "C" fn glimpse_trace_dims(trace: *const GlimpseTrace, out: *mut GlimpseDims) -> GlimpseStatus {
    guard(|| {
        non_null!(trace, out);
        let t = &(*trace).inner;
        *out = GlimpseDims {
            layers: t.dims.layers,
            heads: t.dims.heads,
            visual: t.dims.visual,
            prompt: t.dims.prompt,
            generated: t.dims.generated,
            grid_rows: t.patch_grid.rows,
            grid_cols: t.patch_grid.cols,
        };
        GlimpseStatus::Ok
    })
}

/// Checks trace invariants. `*ok` is false when violations were found; their
/// count goes to `*violations` and the first one to [`glimpse_last_error`].
#[no_mangle]
pub unsafe extern "C" fn glimpse_trace_validate(
    trace: *const GlimpseTrace,
    row_tol: f64,
    ok: *mut bool,
    violations: *mut usize,
) -> GlimpseStatus {
    let mut first = None;
    let status = guard(|| {
        non_null!(trace, ok, violations);
        let report = validate_trace(&(*trace).inner, row_tol);
        *ok = report.ok;
        *violations = report.violations.len();
        first = report
            .violations
            .first()
            .map(|v| format!("{} at {}: {}", v.code, v.location, v.message));
        GlimpseStatus::Ok
    });
    if let Some(msg) = first {
        set_error(msg);
    }
    status
}

/// Runs the engine. `config` may be NULL for defaults.
#[no_mangle]
pub unsafe extern "C" fn glimpse_explain(
    trace: *const GlimpseTrace,
    config: *const GlimpseConfig,
    out: *mut *mut GlimpseExplanation,
) -> GlimpseStatus {
    guard(|| {
        non_null!(trace, out);
        let cfg = if config.is_null() {
            GlimpseConfig::default()
        } else {
            *config
        };
        let (engine, tokens) = cfg.split();
        if let Err(e) = tokens.validate() {
            return from_error(e);
        }
        match glimpse::explain(&(*trace).inner, &engine, &tokens) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GlimpseExplanation { inner }));
                GlimpseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn glimpse_explanation_free(explanation: *mut GlimpseExplanation) {
    if !explanation.is_null() {
        drop(Box::from_raw(explanation));
    }
}

/// Visual saliency, row-major over the patch grid (K values).
#[no_mangle]
pub unsafe extern "C" fn glimpse_explanation_visual(
    explanation: *const GlimpseExplanation,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> GlimpseStatus {
    guard(|| {
        non_null!(explanation);
        copy_out((*explanation).inner.result.visual.as_slice(), buf, cap, len_out)
    })
}

/// Prompt-token saliency (M values).
#[no_mangle]
pub unsafe extern "C" fn glimpse_explanation_prompt(
    explanation: *const GlimpseExplanation,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> GlimpseStatus {
    guard(|| {
        non_null!(explanation);
        copy_out(&(*explanation).inner.result.prompt, buf, cap, len_out)
    })
}

/// Joint token relevance per generated token (T values).
#[no_mangle]
pub unsafe extern "C" fn glimpse_explanation_token_relevance(
    explanation: *const GlimpseExplanation,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> GlimpseStatus {
    guard(|| {
        non_null!(explanation);
        copy_out(&(*explanation).inner.result.token_gamma, buf, cap, len_out)
    })
}

/// Full token weight table as a JSON string; free it with [`glimpse_string_free`].
#[no_mangle]
pub unsafe extern "C" fn glimpse_explanation_tokens_json(
    explanation: *const GlimpseExplanation,
    out: *mut *mut c_char,
) -> GlimpseStatus {
    guard(|| {
        non_null!(explanation, out);
        let json = serde_json::to_string(&(*explanation).inner.table).expect("table serializes");
        match CString::new(json) {
            Ok(s) => {
                *out = s.into_raw();
                GlimpseStatus::Ok
            }
            Err(e) => fail(GlimpseStatus::InvalidArgument, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn glimpse_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Baseline visual map (K values, row-major). `kind` is `raw`, `rollout`,
/// `gradcam`, `tmme` or `tmme-last-<k>`.
#[no_mangle]
pub unsafe extern "C" fn glimpse_baseline(
    trace: *const GlimpseTrace,
    kind: *const c_char,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> GlimpseStatus {
    guard(|| {
        non_null!(trace);
        let kind = match str_arg(kind, "kind").map(str::parse::<BaselineKind>) {
            Ok(Ok(k)) => k,
            Ok(Err(e)) => return from_error(e),
            Err(s) => return s,
        };
        match baseline_map(&(*trace).inner, kind) {
            Ok(map) => copy_out(map.as_slice(), buf, cap, len_out),
            Err(e) => from_error(e),
        }
    })
}

unsafe fn grids(
    saliency: *const f64,
    human: *const f64,
    rows: usize,
    cols: usize,
) -> Result<(Grid, Grid), GlimpseStatus> {
    if saliency.is_null() || human.is_null() {
        return Err(fail(GlimpseStatus::NullPointer, "grid pointer is NULL"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(GlimpseStatus::InvalidArgument, "grid too large"))?;
    let make = |p: *const f64| {
        Grid::new(rows, cols, std::slice::from_raw_parts(p, n).to_vec()).map_err(from_error)
    };
    Ok((make(saliency)?, make(human)?))
}

/// Normalized scanpath saliency of `saliency` against `human` (both rows x cols).
#[no_mangle]
pub unsafe extern "C" fn glimpse_nss(
    saliency: *const f64,
    human: *const f64,
    rows: usize,
    cols: usize,
    theta: f64,
    out: *mut f64,
) -> GlimpseStatus {
    guard(|| {
        non_null!(out);
        let (s, h) = match grids(saliency, human, rows, cols) {
            Ok(g) => g,
            Err(st) => return st,
        };
        match nss(&s, &h, theta) {
            Ok(v) => {
                *out = v;
                GlimpseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Spearman rank correlation between two rows x cols grids.
#[no_mangle]
pub unsafe extern "C" fn glimpse_spearman(
    saliency: *const f64,
    human: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> GlimpseStatus {
    guard(|| {
        non_null!(out);
        let (s, h) = match grids(saliency, human, rows, cols) {
            Ok(g) => g,
            Err(st) => return st,
        };
        match spearman(&s, &h) {
            Ok(v) => {
                *out = v;
                GlimpseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
