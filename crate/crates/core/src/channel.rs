//! Two-state block-fading binary symmetric channel.
//!
//! Each block of `t` channel uses sees a BSC whose crossover probability is
//! `delta0` (bad state) or `delta1` (good state). States are i.i.d. across
//! blocks with `P(good) = q`. Everything here is a pure function of the
//! parameters.

use std::f64::consts::{LN_2, SQRT_2};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{domain, Result};

/// Fading state of one block.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum State {
    Bad = 0,
    Good = 1,
}

impl State {
    pub const BOTH: [State; 2] = [State::Bad, State::Good];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(State::Bad),
            1 => Ok(State::Good),
            other => domain(format!("state must be 0 or 1, got {other}")),
        }
    }

    /// Parses a comma separated list such as `0,1,0`.
    pub fn parse_list(s: &str) -> Result<Vec<State>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "0" => Ok(State::Bad),
                "1" => Ok(State::Good),
                other => domain(format!("state must be 0 or 1, got {other:?}")),
            })
            .collect()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Unit for entropies, capacities and dispersions.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Bits,
    Nats,
}

impl Unit {
    /// Multiplier taking a value in nats to this unit.
    #[inline]
    pub fn from_nats(self) -> f64 {
        match self {
            Unit::Bits => 1.0 / LN_2,
            Unit::Nats => 1.0,
        }
    }
}

/// Whether a dispersion is normalized per channel use or per block.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Span {
    PerUse,
    PerBlock,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Crossover probability in the bad state.
    pub delta0: f64,
    /// Crossover probability in the good state.
    pub delta1: f64,
    /// Probability that a block is in the good state.
    pub q: f64,
    /// Channel uses per block.
    pub t: u32,
}

impl ChannelParams {
    /// Validated constructor. Requires `0 <= delta1 <= delta0 <= 0.5`,
    /// `q` in `[0, 1]` and `t >= 1`. Equal crossovers describe a channel
    /// without fading and are accepted.
    pub fn new(delta0: f64, delta1: f64, q: f64, t: u32) -> Result<Self> {
        let p = ChannelParams { delta0, delta1, q, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ChannelParams { delta0, delta1, q, t } = *self;
        if !(0.0..=0.5).contains(&delta0) || !(0.0..=0.5).contains(&delta1) {
            return domain(format!(
                "crossover probabilities must lie in [0, 0.5] (delta0={delta0}, delta1={delta1})"
            ));
        }
        if delta1 > delta0 {
            return domain(format!(
                "the good state must be the better one: delta1={delta1} > delta0={delta0}"
            ));
        }
        if !(0.0..=1.0).contains(&q) {
            return domain(format!("q must lie in [0, 1], got {q}"));
        }
        if t == 0 {
            return domain("block length T must be at least 1");
        }
        Ok(())
    }

    #[inline]
    pub fn delta(&self, s: State) -> f64 {
        match s {
            State::Bad => self.delta0,
            State::Good => self.delta1,
        }
    }

    /// Probability of a single block being in state `s`.
    #[inline]
    pub fn state_prob(&self, s: State) -> f64 {
        match s {
            State::Bad => 1.0 - self.q,
            State::Good => self.q,
        }
    }
}

/// `-p log p - (1-p) log(1-p)` with `0 log 0 = 0`.
pub fn binary_entropy(p: f64, unit: Unit) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return domain(format!("binary entropy needs p in [0, 1], got {p}"));
    }
    Ok(binary_entropy_nats(p) * unit.from_nats())
}

pub(crate) fn binary_entropy_nats(p: f64) -> f64 {
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    -xlnx(p) - xlnx(1.0 - p)
}

/// Ergodic capacity `1 - q h(delta1) - (1-q) h(delta0)` in bits per channel use.
pub fn capacity(params: &ChannelParams) -> f64 {
    let h0 = binary_entropy_nats(params.delta0);
    let h1 = binary_entropy_nats(params.delta1);
    (LN_2 - params.q * h1 - (1.0 - params.q) * h0) / LN_2
}

/// Variance of the BSC information density per channel use, in nats^2.
fn bsc_varentropy_nats(delta: f64) -> f64 {
    if delta <= 0.0 || delta >= 1.0 {
        return 0.0;
    }
    let llr = ((1.0 - delta) / delta).ln();
    delta * (1.0 - delta) * llr * llr
}

/// Channel dispersion: the per-state BSC varentropy averaged over the state
/// plus the fading term `T q (1-q) (h(delta0) - h(delta1))^2`.
///
/// The result is in `unit`^2; `Span::PerBlock` multiplies by `T`.
pub fn dispersion(params: &ChannelParams, span: Span, unit: Unit) -> f64 {
    let q = params.q;
    let inner = q * bsc_varentropy_nats(params.delta1) + (1.0 - q) * bsc_varentropy_nats(params.delta0);
    let dh = binary_entropy_nats(params.delta0) - binary_entropy_nats(params.delta1);
    let fading = params.t as f64 * q * (1.0 - q) * dh * dh;
    let scale = unit.from_nats() * unit.from_nats();
    let per_use = (inner + fading) * scale;
    match span {
        Span::PerUse => per_use,
        Span::PerBlock => per_use * params.t as f64,
    }
}

/// Gaussian tail `Q(x) = P(N(0,1) > x)`.
pub fn q_func(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Inverse of the Gaussian tail function.
///
/// Starts from Acklam's rational approximation of the normal quantile
/// (relative error about 1e-9) and polishes it with two Newton steps on
/// `Q(x) - eps`.
pub fn q_inv(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return domain(format!("Q^-1 needs eps in (0, 1), got {eps}"));
    }
    // Q^-1(eps) = Phi^-1(1 - eps) = -Phi^-1(eps)
    let mut x = -acklam_quantile(eps);
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf <= 0.0 {
            break;
        }
        x += (q_func(x) - eps) / pdf;
    }
    Ok(x)
}

fn acklam_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Normal approximation `C - sqrt(V/n) Q^-1(eps)` in bits per channel use,
/// without any `O(log n / n)` correction. Negative values are returned as is.
pub fn normal_approx_rate(params: &ChannelParams, n: f64, eps: f64) -> Result<f64> {
    if n.is_nan() || n < 1.0 {
        return domain(format!("blocklength must be at least 1, got {n}"));
    }
    let qinv = q_inv(eps)?;
    let v = dispersion(params, Span::PerUse, Unit::Bits);
    Ok(capacity(params) - (v / n).sqrt() * qinv)
}

/// Second-order summary of a channel at one operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderResult {
    pub capacity_bits: f64,
    pub dispersion_per_use: f64,
    pub dispersion_unit: Unit,
    pub rate_bits: f64,
}

impl SecondOrderResult {
    pub fn evaluate(params: &ChannelParams, n: f64, eps: f64) -> Result<Self> {
        Ok(SecondOrderResult {
            capacity_bits: capacity(params),
            dispersion_per_use: dispersion(params, Span::PerUse, Unit::Bits),
            dispersion_unit: Unit::Bits,
            rate_bits: normal_approx_rate(params, n, eps)?,
        })
    }
}
