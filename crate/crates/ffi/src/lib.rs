//! C interface to `brq-core`.
//!
//! Every function returns a [`BrqStatus`] and writes its result through an
//! out pointer. On failure the message is kept per thread and can be read
//! with [`brq_last_error`]. Channels are opaque handles created by
//! [`brq_channel_new`] and released with [`brq_channel_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use brq_core::bounds::{ems_bound_prop1, ems_bound_thm1, Engine, MessageSchedule};
use brq_core::channel::{capacity, dispersion, normal_approx_rate, ChannelParams, Span, State, Unit};
use brq_core::schemes::{evaluate, scheme_fixed, Scheme, SchemeConfig, SchemeCurvePoint};
use brq_core::Error;

/// Outcome of a call.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BrqStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Usage = 3,
    Guard = 4,
    Infeasible = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BrqUnit {
    Bits = 0,
    Nats = 1,
}

#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BrqMethod {
    Thm1 = 0,
    Prop1 = 1,
}

#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BrqScheme {
    Fixed = 0,
    Vld = 1,
    Vlsf = 2,
    BrqCsit = 3,
    BrqSf = 4,
}

/// Knobs of the variable-length schemes.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BrqSchemeConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub horizon: u32,
    pub p_min: f64,
    pub max_expansions: u32,
}

/// One operating point. `ln_m1` and `avg_nats` are in nats.
#[repr(C)]
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct BrqCurvePoint {
    pub ln_m1: f64,
    pub avg_blocks: f64,
    pub avg_blocklength: f64,
    pub avg_nats: f64,
    pub rate_bits: f64,
    pub eps_certified: f64,
    pub truncation_gap: f64,
}

/// Opaque channel handle.
pub struct BrqChannel {
    params: ChannelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BrqStatus {
    match e {
        Error::Domain(_) => BrqStatus::Domain,
        Error::Usage(_) | Error::Config(_) => BrqStatus::Usage,
        Error::Guard(_) => BrqStatus::Guard,
        Error::Infeasible(_) => BrqStatus::Infeasible,
        _ => BrqStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into a status.
fn guarded(f: impl FnOnce() -> Result<(), BrqStatus>) -> BrqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BrqStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            BrqStatus::Internal
        }
    }
}

fn fail(e: Error) -> BrqStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> BrqStatus {
    set_error(format!("{what} is null"));
    BrqStatus::NullPointer
}

unsafe fn channel<'a>(ch: *const BrqChannel) -> Result<&'a ChannelParams, BrqStatus> {
    ch.as_ref().map(|c| &c.params).ok_or_else(|| null("channel"))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), BrqStatus> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn brq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a channel. `*out` receives a handle owned by the caller.
///
/// # Safety
/// `out` must be null or valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn brq_channel_new(
    delta0: f64,
    delta1: f64,
    q: f64,
    t: u32,
    out: *mut *mut BrqChannel,
) -> BrqStatus {
    guarded(|| {
        let params = ChannelParams::new(delta0, delta1, q, t).map_err(fail)?;
        write(out, Box::into_raw(Box::new(BrqChannel { params })))
    })
}

/// Releases a handle from [`brq_channel_new`]. Null is ignored.
///
/// # Safety
/// `ch` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn brq_channel_free(ch: *mut BrqChannel) {
    if !ch.is_null() {
        drop(Box::from_raw(ch));
    }
}

/// Capacity in bits per channel use.
///
/// # Safety
/// `ch` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn brq_capacity(ch: *const BrqChannel, out: *mut f64) -> BrqStatus {
    guarded(|| write(out, capacity(channel(ch)?)))
}

/// Dispersion per channel use (or per block), in `unit` squared.
///
/// # Safety
/// `ch` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn brq_dispersion(
    ch: *const BrqChannel,
    per_block: bool,
    unit: BrqUnit,
    out: *mut f64,
) -> BrqStatus {
    guarded(|| {
        let span = if per_block { Span::PerBlock } else { Span::PerUse };
        let unit = match unit {
            BrqUnit::Bits => Unit::Bits,
            BrqUnit::Nats => Unit::Nats,
        };
        write(out, dispersion(channel(ch)?, span, unit))
    })
}

/// Normal approximation of the fixed-length rate at `n` channel uses, in
/// bits per use.
///
/// # Safety
/// `ch` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn brq_normal_approx_rate(
    ch: *const BrqChannel,
    n: f64,
    epsilon: f64,
    out: *mut f64,
) -> BrqStatus {
    guarded(|| write(out, normal_approx_rate(channel(ch)?, n, epsilon).map_err(fail)?))
}

/// Error bound of an expanding-message-set code with `len` blocks:
/// `states[i]` is 0 (bad) or 1 (good) and `sizes[i] >= 1` the message-set
/// factor of block `i`. Uses the exact engine.
///
/// # Safety
/// `states` and `sizes` must each point to `len` readable elements.
#[no_mangle]
pub unsafe extern "C" fn brq_ems_bound(
    ch: *const BrqChannel,
    states: *const u8,
    sizes: *const f64,
    len: usize,
    method: BrqMethod,
    out: *mut f64,
) -> BrqStatus {
    guarded(|| {
        let p = channel(ch)?;
        if states.is_null() || sizes.is_null() {
            return Err(null("states or sizes"));
        }
        let st = slice::from_raw_parts(states, len)
            .iter()
            .map(|&b| State::from_bit(b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fail)?;
        let sched = MessageSchedule::from_sizes(slice::from_raw_parts(sizes, len)).map_err(fail)?;
        let b = match method {
            BrqMethod::Thm1 => ems_bound_thm1(p, &st, &sched, Engine::Exact),
            BrqMethod::Prop1 => ems_bound_prop1(p, &st, &sched, Engine::Exact),
        }
        .map_err(fail)?;
        write(out, b.epsilon_bound)
    })
}

/// Defaults used by the command line.
#[no_mangle]
pub extern "C" fn brq_scheme_config_default() -> BrqSchemeConfig {
    let d = SchemeConfig::default();
    BrqSchemeConfig {
        epsilon: d.epsilon,
        beta: d.beta,
        horizon: d.horizon,
        p_min: d.p_min,
        max_expansions: d.max_expansions,
    }
}

fn to_point(p: SchemeCurvePoint) -> BrqCurvePoint {
    BrqCurvePoint {
        ln_m1: p.ln_m1,
        avg_blocks: p.avg_blocks,
        avg_blocklength: p.avg_blocklength,
        avg_nats: p.avg_nats,
        rate_bits: p.rate_bits,
        eps_certified: p.eps_certified,
        truncation_gap: p.truncation_gap,
    }
}

/// Evaluates one scheme. `x` is `ln M_1` for the variable-length schemes
/// and the number of blocks for [`BrqScheme::Fixed`].
///
/// # Safety
/// `ch` must be a live handle, `cfg` readable and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn brq_scheme_point(
    ch: *const BrqChannel,
    scheme: BrqScheme,
    x: f64,
    cfg: *const BrqSchemeConfig,
    out: *mut BrqCurvePoint,
) -> BrqStatus {
    guarded(|| {
        let p = channel(ch)?;
        let c = cfg.as_ref().ok_or_else(|| null("config"))?;
        let sc = SchemeConfig {
            epsilon: c.epsilon,
            beta: c.beta,
            horizon: c.horizon,
            p_min: c.p_min,
            max_expansions: c.max_expansions,
        };
        let point = match scheme {
            BrqScheme::Fixed => {
                if !(x >= 1.0 && x.fract() == 0.0 && x <= u32::MAX as f64) {
                    return Err(fail(Error::Domain(format!(
                        "fixed scheme needs a whole number of blocks, got {x}"
                    ))));
                }
                scheme_fixed(p, x as u32, sc.epsilon)
            }
            BrqScheme::Vld => evaluate(Scheme::Vld, p, x, &sc),
            BrqScheme::Vlsf => evaluate(Scheme::Vlsf, p, x, &sc),
            BrqScheme::BrqCsit => evaluate(Scheme::BrqCsit, p, x, &sc),
            BrqScheme::BrqSf => evaluate(Scheme::BrqSf, p, x, &sc),
        }
        .map_err(fail)?;
        write(out, to_point(point))
    })
}
