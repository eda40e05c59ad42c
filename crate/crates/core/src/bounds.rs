//! Error-probability bounds for expanding-message-set codes.
//!
//! A codebook is grown block by block: before block `n` the message set is
//! multiplied by `M_n`, and block `n` depends on all messages injected so far.
//! With `M = M_1 ... M_N` codewords and threshold `gamma = ln((M - 1) / 2)`,
//! the dependence-testing decoder errs with probability at most
//!
//! ```text
//! P(i <= gamma) + sum_n (M_n - 1) M_{n+1}^N / 2 * P(i_n > gamma)
//! ```
//!
//! where `i_n` is the density with blocks `n..N` observed under the
//! unconditioned output law ([`ems_bound_thm1`]). [`ems_bound_prop1`] computes
//! the same quantity by tilting the conditioned law instead.
//!
//! With stop feedback the decoder stops at the first block `tau` where the
//! running density crosses `Gamma_tau = gamma_1 + ... + gamma_tau`;
//! [`emssf_bound_loosened`] bounds the resulting error probability by
//! `sum_n P(tau = n) W_n`.
//!
//! All message-set sizes are handled as natural logarithms so that sizes such
//! as `2^400` pose no problem.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, State};
use crate::dist::{
    block_info_pmf, convolve, first_passage_with, lattice_first_passage, BlockMeasure, DensityLaw, FirstPassageResult,
    GridLaw, GridPmf, LatticeContext, LatticeWalk, LevelQuery, Measure, Rounding, WalkKernel,
};
use crate::error::{domain, usage, Error, Result};

/// How densities are represented when evaluating a bound.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    /// Exact flip-count lattice. Tail laws are kept on their full support in
    /// the log domain; only stopping-time walks drop mass below `1e-20`,
    /// which is charged pessimistically.
    Exact,
    /// Uniform grid of the given step with tracked rounding slack.
    Grid { step: f64, rounding: Rounding },
}

impl Engine {
    pub fn rounding(&self) -> Rounding {
        match self {
            Engine::Exact => Rounding::Pessimistic,
            Engine::Grid { rounding, .. } => *rounding,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Engine::Grid { step, .. } if !(*step > 0.0 && step.is_finite()) => {
                domain(format!("grid step must be positive, got {step}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Thm1,
    Prop1,
    Thm2Loosened,
    Dt,
}

/// `ln M_n` per epoch and, for stop-feedback codes, the per-block threshold
/// increments `gamma_n`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageSchedule {
    pub ln_m: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl MessageSchedule {
    /// From message-set sizes (each `>= 1`).
    pub fn from_sizes(sizes: &[f64]) -> Result<Self> {
        let ln_m = sizes
            .iter()
            .map(|&m| {
                if m >= 1.0 && m.is_finite() {
                    Ok(m.ln())
                } else {
                    domain(format!("message-set size must be >= 1, got {m}"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MessageSchedule { ln_m, gamma: vec![] })
    }

    pub fn from_ln(ln_m: Vec<f64>) -> Result<Self> {
        let s = MessageSchedule { ln_m, gamma: vec![] };
        s.validate()?;
        Ok(s)
    }

    pub fn with_gamma(mut self, gamma: Vec<f64>) -> Result<Self> {
        self.gamma = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ln_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_m.is_empty()
    }

    /// `ln M_1^N`.
    pub fn ln_total(&self) -> f64 {
        self.ln_m.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if let Some(x) = self.ln_m.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
            return domain(format!("ln M must be finite and >= 0, got {x}"));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return domain(format!("threshold increment must be finite and >= 0, got {g}"));
        }
        Ok(())
    }
}

/// A bound split into its missed-detection and per-epoch confusion parts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundBreakdown {
    /// Raw value; may exceed 1.
    pub epsilon_bound: f64,
    /// `min(epsilon_bound, 1)`.
    pub epsilon_clipped: f64,
    pub missed_detection: f64,
    pub confusion_terms: Vec<f64>,
    /// Decoding threshold `ln((M - 1) / 2)`.
    pub threshold: f64,
    pub method: Method,
    pub rounding: Rounding,
    pub engine: Engine,
}

impl BoundBreakdown {
    fn assemble(missed: f64, confusion: Vec<f64>, threshold: f64, method: Method, engine: Engine) -> Self {
        let total = missed + confusion.iter().sum::<f64>();
        BoundBreakdown {
            epsilon_bound: total,
            epsilon_clipped: total.min(1.0),
            missed_detection: missed,
            confusion_terms: confusion,
            threshold,
            method,
            rounding: engine.rounding(),
            engine,
        }
    }

    fn zero(epochs: usize, method: Method, engine: Engine) -> Self {
        Self::assemble(0.0, vec![0.0; epochs], f64::NEG_INFINITY, method, engine)
    }
}

/// `ln(e^x - 1)` for `x >= 0`; `-inf` at 0.
pub fn ln_expm1(x: f64) -> f64 {
    if x == 0.0 {
        f64::NEG_INFINITY
    } else if x > 40.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Epoch `n` with its message-set factor and the blocks it spans.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub ln_m: f64,
    pub states: Vec<State>,
}

fn counts_of<'a>(epochs: impl IntoIterator<Item = &'a Epoch>) -> [u32; 2] {
    let mut c = [0, 0];
    for e in epochs {
        for s in &e.states {
            c[s.index()] += 1;
        }
    }
    c
}

/// Groups blocks into epochs: a block with `M_n = 1` joins the previous
/// epoch, since it adds no confusion term.
pub fn epochs_from_blocks(states: &[State], ln_m: &[f64]) -> Vec<Epoch> {
    let mut out: Vec<Epoch> = Vec::new();
    for (i, (&s, &l)) in states.iter().zip(ln_m).enumerate() {
        if i > 0 && l == 0.0 {
            out.last_mut().unwrap().states.push(s);
        } else {
            out.push(Epoch {
                ln_m: l,
                states: vec![s],
            });
        }
    }
    out
}

enum Backend {
    Lattice(LatticeContext),
    Grid {
        step: f64,
        blocks: RefCell<HashMap<BlockMeasure, GridPmf>>,
        laws: RefCell<HashMap<Vec<BlockMeasure>, Rc<GridLaw>>>,
    },
}

/// Evaluates bounds for one channel, caching the laws it builds.
///
/// Not `Sync`; parallel callers create one context per task.
pub struct BoundContext {
    params: ChannelParams,
    engine: Engine,
    backend: Backend,
}

impl BoundContext {
    pub fn new(params: &ChannelParams, engine: Engine) -> Result<Self> {
        params.validate()?;
        engine.validate()?;
        let backend = match engine {
            Engine::Exact => Backend::Lattice(LatticeContext::new(params)),
            Engine::Grid { step, .. } => Backend::Grid {
                step,
                blocks: RefCell::new(HashMap::new()),
                laws: RefCell::new(HashMap::new()),
            },
        };
        Ok(BoundContext {
            params: *params,
            engine,
            backend,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn engine(&self) -> Engine {
        self.engine
    }

    /// Law of the density over `cond` blocks (conditioned) followed by
    /// `uncond` blocks (unconditioned).
    fn law(&self, cond: &[Epoch], uncond: &[Epoch]) -> Result<Rc<dyn DensityLaw>> {
        match &self.backend {
            Backend::Lattice(ctx) => Ok(Rc::new(ctx.law(counts_of(cond), counts_of(uncond)))),
            Backend::Grid { step, blocks, laws } => {
                let mut key = Vec::new();
                for (group, measure) in [(cond, Measure::Conditioned), (uncond, Measure::Unconditioned)] {
                    for e in group {
                        key.extend(e.states.iter().map(|&s| BlockMeasure::new(s, measure)));
                    }
                }
                if let Some(l) = laws.borrow().get(&key) {
                    return Ok(l.clone());
                }
                let mut acc = GridPmf::point(0.0, *step, 0.0)?;
                for bm in &key {
                    let mut cache = blocks.borrow_mut();
                    let b = match cache.get(bm) {
                        Some(b) => b.clone(),
                        None => {
                            let b = block_info_pmf(&self.params, *bm, *step)?;
                            cache.insert(*bm, b.clone());
                            b
                        }
                    };
                    acc = convolve(&acc, &b)?;
                }
                let law = Rc::new(GridLaw::new(acc));
                laws.borrow_mut().insert(key, law.clone());
                Ok(law)
            }
        }
    }

    /// Dependence-testing bound of an expanding-message-set code over the
    /// given epochs.
    pub fn thm1(&self, epochs: &[Epoch]) -> Result<BoundBreakdown> {
        let ln_total: f64 = epochs.iter().map(|e| e.ln_m).sum();
        if ln_total == 0.0 {
            return Ok(BoundBreakdown::zero(epochs.len(), Method::Thm1, self.engine));
        }
        self.thm1_at(epochs, ln_expm1(ln_total) - LN_2)
    }

    /// [`BoundContext::thm1`] with the decoder threshold set to `gamma`
    /// instead of `ln((M - 1)/2)`. The weights do not depend on the
    /// threshold, so this bounds the error of the threshold decoder at any
    /// `gamma`.
    pub fn thm1_at(&self, epochs: &[Epoch], gamma: f64) -> Result<BoundBreakdown> {
        if gamma.is_nan() {
            return domain("threshold is NaN");
        }
        let r = self.engine.rounding();
        let ln_total: f64 = epochs.iter().map(|e| e.ln_m).sum();
        let missed = self.law(epochs, &[])?.cdf(gamma, r);
        let mut confusion = Vec::with_capacity(epochs.len());
        let mut later: f64 = ln_total;
        for n in 0..epochs.len() {
            later -= epochs[n].ln_m;
            if epochs[n].ln_m == 0.0 {
                confusion.push(0.0);
                continue;
            }
            let ln_w = ln_expm1(epochs[n].ln_m) + later.max(0.0) - LN_2;
            let ln_tail = self.law(&epochs[..n], &epochs[n..])?.ln_ccdf(gamma, r);
            confusion.push((ln_w + ln_tail).exp());
        }
        Ok(BoundBreakdown::assemble(
            missed,
            confusion,
            gamma,
            Method::Thm1,
            self.engine,
        ))
    }

    /// The same bound as [`BoundContext::thm1`], computed entirely under the
    /// conditioned law: epoch `n` contributes
    /// `c_n E[1{i <= gamma} + exp(rho_n - (i - gamma)) 1{i > gamma}]` with
    /// `c_n = (M_n - 1) M_{n+1}^N / (M - 1)` and `rho_n` the density of the
    /// blocks before epoch `n`.
    pub fn prop1(&self, epochs: &[Epoch]) -> Result<BoundBreakdown> {
        let r = self.engine.rounding();
        let ln_total: f64 = epochs.iter().map(|e| e.ln_m).sum();
        if ln_total == 0.0 {
            return Ok(BoundBreakdown::zero(epochs.len(), Method::Prop1, self.engine));
        }
        let ln_mm1 = ln_expm1(ln_total);
        let gamma = ln_mm1 - LN_2;
        let mut missed = 0.0;
        let mut confusion = Vec::with_capacity(epochs.len());
        let mut later = ln_total;
        for n in 0..epochs.len() {
            later -= epochs[n].ln_m;
            if epochs[n].ln_m == 0.0 {
                confusion.push(0.0);
                continue;
            }
            let ln_c = ln_expm1(epochs[n].ln_m) + later.max(0.0) - ln_mm1;
            let a = self.law(&epochs[..n], &[])?;
            let b = self.law(&epochs[n..], &[])?;
            let s = a.slack();
            // The below-threshold part decreases in rho and the tilted
            // tail part increases, so each is bracketed at its own end of
            // the atom's slack interval.
            let (below_shift, tail_shift) = match r {
                Rounding::Pessimistic => (s, -s),
                Rounding::Optimistic => (-s, s),
            };
            let mut below = 0.0;
            let mut tilted = 0.0;
            a.for_each_atom(&mut |rho, ln_p| {
                below += ln_p.exp() * b.cdf(gamma - rho + below_shift, r);
                let ln_tail = b.ln_exp_tail(gamma - rho + tail_shift, r);
                tilted += (ln_p + rho - tail_shift + ln_tail).exp();
            });
            let c = ln_c.exp();
            missed += c * below;
            confusion.push(c * tilted);
        }
        Ok(BoundBreakdown::assemble(
            missed,
            confusion,
            gamma,
            Method::Prop1,
            self.engine,
        ))
    }

    /// Dependence-testing bound for a single message set of size `e^{ln_m1}`
    /// sent over all given blocks.
    pub fn dt(&self, states: &[State], ln_m1: f64) -> Result<BoundBreakdown> {
        if states.is_empty() {
            return usage("no blocks");
        }
        let mut b = self.thm1(&[Epoch {
            ln_m: ln_m1,
            states: states.to_vec(),
        }])?;
        b.method = Method::Dt;
        Ok(b)
    }
}

fn check_blocks(states: &[State], sched: &MessageSchedule) -> Result<()> {
    sched.validate()?;
    if states.is_empty() || states.len() != sched.len() {
        return usage(format!("{} states for {} epochs", states.len(), sched.len()));
    }
    Ok(())
}

/// Dependence-testing bound of an expanding-message-set code, one epoch per
/// block.
pub fn ems_bound_thm1(
    params: &ChannelParams,
    states: &[State],
    sched: &MessageSchedule,
    engine: Engine,
) -> Result<BoundBreakdown> {
    check_blocks(states, sched)?;
    BoundContext::new(params, engine)?.thm1(&epochs_from_blocks(states, &sched.ln_m))
}

/// [`ems_bound_thm1`] for a threshold decoder using `gamma` in place of
/// `ln((M - 1)/2)`.
pub fn ems_bound_thm1_at(
    params: &ChannelParams,
    states: &[State],
    sched: &MessageSchedule,
    gamma: f64,
    engine: Engine,
) -> Result<BoundBreakdown> {
    check_blocks(states, sched)?;
    BoundContext::new(params, engine)?.thm1_at(&epochs_from_blocks(states, &sched.ln_m), gamma)
}

/// [`ems_bound_thm1`] evaluated through the conditioned law only.
pub fn ems_bound_prop1(
    params: &ChannelParams,
    states: &[State],
    sched: &MessageSchedule,
    engine: Engine,
) -> Result<BoundBreakdown> {
    check_blocks(states, sched)?;
    BoundContext::new(params, engine)?.prop1(&epochs_from_blocks(states, &sched.ln_m))
}

/// Dependence-testing bound for one message of size `e^{ln_m1}` over the
/// given blocks.
pub fn dt_bound(params: &ChannelParams, states: &[State], ln_m1: f64, engine: Engine) -> Result<BoundBreakdown> {
    if !(ln_m1 >= 0.0 && ln_m1.is_finite()) {
        return domain(format!("ln M must be finite and >= 0, got {ln_m1}"));
    }
    BoundContext::new(params, engine)?.dt(states, ln_m1)
}

/// `ln W_k` from `ln W_{k-1}` for a block with threshold increment `gamma_k`
/// and message-set factor `e^{ln_m}`:
/// `W_k = e^{-gamma_k} (M_k W_{k-1} + M_k - 1)`.
pub fn next_ln_weight(ln_w_prev: f64, ln_m: f64, gamma: f64) -> f64 {
    log_add(ln_m + ln_w_prev, ln_expm1(ln_m)) - gamma
}

/// Smallest `gamma_k >= 0` with `W_k <= target`, given `ln W_{k-1}`.
pub fn gamma_step(ln_w_prev: f64, ln_m: f64, target: f64) -> f64 {
    let ln_a = log_add(ln_m + ln_w_prev, ln_expm1(ln_m));
    (ln_a - target.ln()).max(0.0)
}

/// [`gamma_step`] applied block by block with target `epsilon`; `M_n = 1`
/// beyond the end of `ln_m`.
pub fn flat_gammas_ln(ln_m: &[f64], horizon: usize, epsilon: f64) -> Vec<f64> {
    let mut ln_w = f64::NEG_INFINITY;
    (0..horizon)
        .map(|k| {
            let x = ln_m.get(k).copied().unwrap_or(0.0);
            let g = gamma_step(ln_w, x, epsilon);
            ln_w = next_ln_weight(ln_w, x, g);
            g
        })
        .collect()
}

/// Result of the loosened stop-feedback bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoosenedBound {
    pub epsilon_bound: f64,
    /// `W_n` per block.
    pub weights: Vec<f64>,
    /// Cumulative levels `Gamma_n`.
    pub levels: Vec<f64>,
    pub stop: FirstPassageResult,
    /// Mean stopping block; the tail beyond the horizon is counted at
    /// `horizon + 1`.
    pub expected_blocks: f64,
    /// Mean number of nats decoded at the stopping block.
    pub expected_nats: f64,
    /// More than `1e-6` of the mass has not stopped by the horizon.
    pub tail_flag: bool,
    pub method: Method,
    pub engine: Engine,
}

/// Loosened error bound of a stop-feedback code.
///
/// `states` fixes the horizon; `sched.ln_m` covers the epochs with new
/// messages (`M_n = 1` beyond) and `sched.gamma` gives one threshold increment
/// per block. Increments beyond the horizon are taken as 0, so the mass still
/// running at the horizon is charged the last weight.
pub fn emssf_bound_loosened(
    params: &ChannelParams,
    states: &[State],
    sched: &MessageSchedule,
    engine: Engine,
) -> Result<LoosenedBound> {
    params.validate()?;
    engine.validate()?;
    sched.validate()?;
    let h = states.len();
    if h == 0 || sched.gamma.len() != h || sched.len() > h {
        return usage(format!(
            "horizon {h} needs {h} threshold increments and at most {h} epochs (got {} and {})",
            sched.gamma.len(),
            sched.len()
        ));
    }
    let mut levels = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    let mut ln_w = f64::NEG_INFINITY;
    let mut acc = 0.0;
    for k in 0..h {
        acc += sched.gamma[k];
        levels.push(acc);
        let ln_m = sched.ln_m.get(k).copied().unwrap_or(0.0);
        ln_w = next_ln_weight(ln_w, ln_m, sched.gamma[k]);
        weights.push(ln_w.exp());
    }
    let stop = match engine {
        Engine::Exact => lattice_first_passage(&WalkKernel::new(params), states, &levels)?,
        Engine::Grid { step, rounding } => {
            let blocks = states
                .iter()
                .map(|&s| block_info_pmf(params, BlockMeasure::new(s, Measure::Conditioned), step))
                .collect::<Result<Vec<_>>>()?;
            first_passage_with(&blocks, &levels, rounding)?.0
        }
    };
    let mut eps = 0.0;
    let mut nats = 0.0;
    let mut cum_nats = 0.0;
    for (k, (&p, &w)) in stop.stop_prob.iter().zip(&weights).take(h).enumerate() {
        cum_nats += sched.ln_m.get(k).copied().unwrap_or(0.0);
        eps += p * w;
        nats += p * cum_nats;
    }
    eps += stop.tail_prob * weights[h - 1];
    nats += stop.tail_prob * sched.ln_total();
    Ok(LoosenedBound {
        epsilon_bound: eps,
        weights,
        levels,
        expected_blocks: stop.expected_stop,
        expected_nats: nats,
        tail_flag: stop.tail_prob > 1e-6,
        stop,
        method: Method::Thm2Loosened,
        engine,
    })
}

/// Smallest `gamma_k` keeping the loosened bound at stopping block `k`
/// (index `k` counted from 0) at or below `target`, given `ln_m[..=k]` and
/// `gamma[..k]` in `sched`.
pub fn solve_gamma_for_epsilon(sched: &MessageSchedule, k: usize, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return domain(format!("target must lie in (0, 1), got {target}"));
    }
    sched.validate()?;
    if sched.gamma.len() < k {
        return usage(format!(
            "need {k} earlier threshold increments, got {}",
            sched.gamma.len()
        ));
    }
    let mut ln_w = f64::NEG_INFINITY;
    for i in 0..k {
        ln_w = next_ln_weight(ln_w, sched.ln_m.get(i).copied().unwrap_or(0.0), sched.gamma[i]);
    }
    let ln_m = sched.ln_m.get(k).copied().unwrap_or(0.0);
    let g = gamma_step(ln_w, ln_m, target);
    if !g.is_finite() {
        return Err(Error::Infeasible(format!("no finite threshold reaches {target}")));
    }
    Ok(g)
}

/// Tolerance on `ln M` of the bisection searches.
pub const LN_M_TOL: f64 = 1e-7;

/// Largest `x` in `[0, upper]` with `ok(x)`, assuming `ok` is monotone
/// (true then false) and `ok(0)` holds.
pub(crate) fn bisect_last_ok(upper: f64, mut ok: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    if ok(upper)? {
        return Ok(upper);
    }
    let (mut lo, mut hi) = (0.0, upper);
    while hi - lo > LN_M_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Largest `ln M_k` such that the dependence-testing bound over `states`
/// (the last one being the block about to be sent) with earlier factors
/// `prefix_ln_m` stays at or below `target`. Returns 0 when even `M_k = 1`
/// misses the target.
pub fn solve_m_for_epsilon(
    params: &ChannelParams,
    states: &[State],
    prefix_ln_m: &[f64],
    target: f64,
    engine: Engine,
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return domain(format!("target must lie in (0, 1), got {target}"));
    }
    if states.len() != prefix_ln_m.len() + 1 {
        return usage(format!(
            "{} states for {} earlier epochs",
            states.len(),
            prefix_ln_m.len()
        ));
    }
    let ctx = BoundContext::new(params, engine)?;
    let mut ln_m = prefix_ln_m.to_vec();
    ln_m.push(0.0);
    let mut eval = |x: f64| -> Result<f64> {
        *ln_m.last_mut().unwrap() = x;
        Ok(ctx.thm1(&epochs_from_blocks(states, &ln_m))?.epsilon_bound)
    };
    if eval(0.0)? > target {
        return Ok(0.0);
    }
    let upper = (states.len() as f64 * params.t as f64 + 1.0) * LN_2;
    bisect_last_ok(upper, |x| Ok(eval(x)? <= target))
}

/// Smallest `ln M_k` for which the conditional probability of stopping at
/// block `k` on a good block is at most `beta`.
///
/// `query` holds the running mass after block `k` sent in the good state,
/// `live` the mass still running before it. Returns 0 when `M_k = 1` already
/// meets `beta`.
pub fn beta_expansion(
    query: &LevelQuery,
    live: f64,
    level_prev: f64,
    ln_w_prev: f64,
    beta: f64,
    target: f64,
    upper: f64,
) -> f64 {
    if live <= 0.0 {
        return 0.0;
    }
    let p = |x: f64| query.mass_at_or_above(level_prev + gamma_step(ln_w_prev, x, target)) / live;
    if p(0.0) <= beta {
        return 0.0;
    }
    if p(upper) > beta {
        return upper;
    }
    let (mut lo, mut hi) = (0.0, upper);
    while hi - lo > LN_M_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if p(mid) <= beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Expansion of the stop-feedback protocol before block `k`: given the
/// blocks sent so far (`states_prefix`, with `sched` holding their `ln M` and
/// threshold increments), returns `(ln M_k, gamma_k)`.
pub fn solve_m_for_beta(
    params: &ChannelParams,
    states_prefix: &[State],
    sched: &MessageSchedule,
    beta: f64,
    target: f64,
) -> Result<(f64, f64)> {
    params.validate()?;
    sched.validate()?;
    if !(0.0..=1.0).contains(&beta) {
        return domain(format!("beta must lie in [0, 1], got {beta}"));
    }
    if !(target > 0.0 && target < 1.0) {
        return domain(format!("target must lie in (0, 1), got {target}"));
    }
    let k = states_prefix.len();
    if sched.gamma.len() != k || sched.len() > k {
        return usage(format!("{k} earlier blocks need {k} threshold increments"));
    }
    let kern = WalkKernel::new(params);
    let mut walk = LatticeWalk::point();
    let mut level = 0.0;
    let mut ln_w = f64::NEG_INFINITY;
    for (i, &s) in states_prefix.iter().enumerate() {
        let ln_m = sched.ln_m.get(i).copied().unwrap_or(0.0);
        level += sched.gamma[i];
        ln_w = next_ln_weight(ln_w, ln_m, sched.gamma[i]);
        walk = walk.advance(&kern, s);
        walk.split_at_level(&kern, level);
    }
    let good = walk.advance(&kern, State::Good);
    let query = LevelQuery::new(&good, &kern);
    let upper = ((k + 1) as f64 * params.t as f64 + 1.0) * LN_2 - target.ln();
    let ln_m = beta_expansion(&query, walk.mass(), level, ln_w, beta, target, upper);
    Ok((ln_m, gamma_step(ln_w, ln_m, target)))
}
