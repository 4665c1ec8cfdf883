//! C interface to the consuq pipeline.
//!
//! Every fallible call returns a [`ConsuqStatus`]. On failure a message is
//! kept per thread and can be fetched with [`consuq_last_error`]. Strings
//! handed out by this library must be released with [`consuq_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use consuq::config::PipelineConfig;
use consuq::conservation::{evaluate_joint_pair, JointPair};
use consuq::frame::{JointId, JointObservation, MeasurementFrame, PayloadKind, SkeletonFrame};
use consuq::ingest::{parse_frames, InputFormat};
use consuq::pipeline::Pipeline;
use consuq::propagation::{self, CombineMode, SensitivityTerm, TypeBModel, TypeBSpec, UncertaintyKind};
use consuq::report;
use consuq::safety::{self, RiskModel, SafetyLimit};
use consuq::stats;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsuqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    ParseError = 5,
    ComputationError = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsuqCombineMode {
    AsPrinted = 0,
    GumSquared = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsuqEstimate {
    pub u: f64,
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub point_estimate: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsuqDistanceUncertainty {
    pub prefactor: f64,
    pub signed_value: f64,
    pub magnitude: f64,
    pub degenerate: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConsuqVerdict {
    pub pfh: f64,
    pub r: f64,
    pub pass: bool,
    /// Positive infinity when `pfh` is zero.
    pub margin_orders: f64,
}

/// Opaque streaming pipeline.
pub struct ConsuqPipeline {
    inner: Pipeline,
    last_timestamp: Option<f64>,
    kind: Option<PayloadKind>,
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

type Failure = (ConsuqStatus, String);

fn fail<T>(status: ConsuqStatus, msg: impl ToString) -> Result<T, Failure> {
    Err((status, msg.to_string()))
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ConsuqStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ConsuqStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ConsuqStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(ConsuqStatus::NullPointer, "null string");
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|e| fail(ConsuqStatus::InvalidUtf8, e))
}

unsafe fn out_ref<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(ConsuqStatus::NullPointer, "null output pointer"), Ok)
}

unsafe fn slice<'a>(p: *const f64, n: usize) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(ConsuqStatus::NullPointer, "null array");
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn vec3(p: *const f64) -> Result<[f64; 3], Failure> {
    let s = slice(p, 3)?;
    Ok([s[0], s[1], s[2]])
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .or_else(|e| fail(ConsuqStatus::ComputationError, e))
}

/// Library version, a static string. Do not free.
#[no_mangle]
pub extern "C" fn consuq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The caller owns
/// the returned string.
#[no_mangle]
pub extern "C" fn consuq_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |m| m.clone().into_raw()))
}

/// # Safety
/// `s` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn consuq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a pipeline from TOML configuration text.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_pipeline_new(config_toml: *const c_char, out: *mut *mut ConsuqPipeline) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        *out = ptr::null_mut();
        let text = read_str(config_toml)?;
        let config = PipelineConfig::from_toml_str(text).or_else(|e| fail(ConsuqStatus::InvalidConfig, e))?;
        let inner = Pipeline::new(config).or_else(|e| fail(ConsuqStatus::InvalidConfig, e))?;
        *out = Box::into_raw(Box::new(ConsuqPipeline {
            inner,
            last_timestamp: None,
            kind: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `pipeline` must come from [`consuq_pipeline_new`] and not have been freed.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn consuq_pipeline_free(pipeline: *mut ConsuqPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Feeds one JSONL frame record. When the record closes a window,
/// `out_report` receives the window report as one JSON line (caller frees);
/// otherwise it is set to NULL.
///
/// # Safety
/// `pipeline` must be a live handle, `frame_json` NUL-terminated and
/// `out_report` writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_pipeline_push(
    pipeline: *mut ConsuqPipeline,
    frame_json: *const c_char,
    out_report: *mut *mut c_char,
) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out_report)?;
        *out = ptr::null_mut();
        let p = out_ref(pipeline)?;
        let text = read_str(frame_json)?;
        let frame = parse_one(p, text)?;
        if let Some(report) = p.inner.push(frame) {
            let mut buf = Vec::new();
            report::write_jsonl(&mut buf, &report).or_else(|e| fail(ConsuqStatus::ComputationError, e))?;
            buf.pop();
            *out = into_c_string(String::from_utf8(buf).expect("JSON is UTF-8"))?;
        }
        Ok(())
    })
}

fn parse_one(p: &mut ConsuqPipeline, text: &str) -> Result<MeasurementFrame, Failure> {
    let geometry = p.inner.config().scan_geometry;
    let (mut frames, stats) =
        parse_frames(text.as_bytes(), InputFormat::Jsonl, geometry).or_else(|e| fail(ConsuqStatus::ParseError, e))?;
    if frames.len() != 1 {
        let why = stats
            .errors
            .first()
            .map_or_else(|| "expected exactly one frame record".to_string(), |e| e.message.clone());
        return fail(ConsuqStatus::ParseError, why);
    }
    let frame = frames.pop().expect("one frame");
    if let Some(t) = p.last_timestamp {
        if frame.timestamp < t {
            return fail(
                ConsuqStatus::InvalidArgument,
                format!("timestamp {} precedes {t}", frame.timestamp),
            );
        }
    }
    if let Some(kind) = p.kind {
        if frame.kind() != kind {
            return fail(
                ConsuqStatus::InvalidArgument,
                format!("payload kind changed from {kind} to {}", frame.kind()),
            );
        }
    }
    p.last_timestamp = Some(frame.timestamp);
    p.kind = Some(frame.kind());
    Ok(frame)
}

/// Ends the stream; `out_dropped` receives the frames of the incomplete
/// trailing window.
///
/// # Safety
/// `pipeline` must be a live handle; `out_dropped` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn consuq_pipeline_finish(pipeline: *mut ConsuqPipeline, out_dropped: *mut usize) -> ConsuqStatus {
    guard(|| {
        let p = out_ref(pipeline)?;
        let dropped = p.inner.finish();
        if let Some(d) = out_dropped.as_mut() {
            *d = dropped;
        }
        Ok(())
    })
}

/// Most frames the pipeline has held at once; 0 for NULL.
///
/// # Safety
/// `pipeline` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn consuq_pipeline_peak_buffered(pipeline: *const ConsuqPipeline) -> usize {
    pipeline.as_ref().map_or(0, |p| p.inner.peak_buffered())
}

/// Combines `n` terms `(sensitivity[i], u[i])`.
///
/// # Safety
/// `sensitivity` and `u` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_combine(
    sensitivity: *const f64,
    u: *const f64,
    n: usize,
    mode: ConsuqCombineMode,
    out: *mut f64,
) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        let (s, u) = (slice(sensitivity, n)?, slice(u, n)?);
        let terms: Vec<_> = s
            .iter()
            .zip(u)
            .enumerate()
            .map(|(i, (&s, &u))| SensitivityTerm::new(format!("t{i}"), s, u, UncertaintyKind::TypeB))
            .collect();
        let mode = match mode {
            ConsuqCombineMode::AsPrinted => CombineMode::AsPrinted,
            ConsuqCombineMode::GumSquared => CombineMode::GumSquared,
        };
        *out = propagation::combine(&terms, mode).or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Uncertainty `slope * x + intercept`, clamped at zero.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_type_b_linear(slope: f64, intercept: f64, x: f64, out: *mut f64) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        let spec = TypeBSpec {
            source_id: "ffi".into(),
            model: TypeBModel::LinearInRange { slope, intercept },
            valid_range: None,
        };
        spec.validate().or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        *out = propagation::type_b_eval(&spec, x)
            .or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?
            .u;
        Ok(())
    })
}

/// `|a - b| - reference` for two 3-vectors.
///
/// # Safety
/// `a` and `b` must point to 3 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_joint_pair_deviation(
    a: *const f64,
    b: *const f64,
    reference: f64,
    out: *mut f64,
) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        let (ja, jb) = (JointId::new(0).expect("0"), JointId::new(1).expect("1"));
        let frame = SkeletonFrame {
            joints: [(ja, JointObservation::new(vec3(a)?)), (jb, JointObservation::new(vec3(b)?))].into(),
        };
        *out = evaluate_joint_pair(&frame, JointPair(ja, jb), reference)
            .or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Bootstrapped uncertainty of `n` signed deviations.
///
/// # Safety
/// `values` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_bootstrap_uncertainty(
    values: *const f64,
    n: usize,
    resamples: usize,
    seed: u64,
    confidence: f64,
    out: *mut ConsuqEstimate,
) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        let v = slice(values, n)?;
        let boot = stats::bootstrap_values(v, resamples, seed).or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        let e = stats::uncertainty_at(&boot, confidence, None).or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        *out = ConsuqEstimate {
            u: e.u,
            interval_lo: e.interval.0,
            interval_hi: e.interval.1,
            point_estimate: e.point_estimate,
        };
        Ok(())
    })
}

/// Uncertainty of the human-robot distance for positions `r_h`, `r_r`.
///
/// # Safety
/// `r_h` and `r_r` must point to 3 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_hr_distance_uncertainty(
    r_h: *const f64,
    r_r: *const f64,
    u_rh: f64,
    u_rr: f64,
    out: *mut ConsuqDistanceUncertainty,
) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        let d = propagation::hr_distance_uncertainty(vec3(r_h)?, vec3(r_r)?, u_rh, u_rr)
            .or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        *out = ConsuqDistanceUncertainty {
            prefactor: d.prefactor,
            signed_value: d.signed,
            magnitude: d.magnitude,
            degenerate: d.degenerate,
        };
        Ok(())
    })
}

/// Checks `u_c * l_bio <= lambda`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn consuq_check_limit(u_c: f64, l_bio: f64, lambda: f64, out: *mut ConsuqVerdict) -> ConsuqStatus {
    guard(|| {
        let out = out_ref(out)?;
        let model = RiskModel {
            severity_constant: 1.0,
            l_bio,
        };
        let limit = SafetyLimit::new(lambda, "custom").or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        let v = safety::check_limit(u_c, &model, &limit).or_else(|e| fail(ConsuqStatus::InvalidArgument, e))?;
        *out = ConsuqVerdict {
            pfh: v.pfh,
            r: v.r,
            pass: v.pass,
            margin_orders: v.margin_orders,
        };
        Ok(())
    })
}
