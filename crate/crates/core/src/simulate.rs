//! Monte Carlo runs of random tree codebooks.
//!
//! Every trial draws a fresh codebook, a uniform message and the channel
//! noise from one ChaCha8 key (the master seed): the trial index selects the
//! stream and each purpose gets its own fixed region of the word counter, so
//! any trial can be replayed alone and results do not depend on how trials
//! are spread over threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::bounds::{ems_bound_thm1_at, emssf_bound_loosened, flat_gammas_ln, Engine, MessageSchedule};
use crate::channel::{ChannelParams, State};
use crate::dist::block_density;
use crate::error::{domain, Error, Result};

/// Largest block length.
pub const MAX_T: u32 = 32;
/// Largest number of full codewords `M_1 ... M_N`.
pub const MAX_CODEWORDS: u64 = 1 << 16;
/// Largest number of trials per run.
pub const MAX_TRIALS: u64 = 10_000_000;

/// Word-counter region per purpose; a region holds `2^40` words.
const REGION: u128 = 1 << 40;
const CODEBOOK_REGION: u128 = 0;
const MESSAGE_REGION: u128 = 1;
const NOISE_REGION: u128 = 2;

fn guard(msg: String) -> Error {
    Error::Guard(msg)
}

/// Random generator for one `(trial, region)` pair of a run.
pub fn trial_rng(master_seed: u64, trial: u64, region: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng.set_word_pos(region * REGION);
    rng
}

fn check_sizes(m: &[u32]) -> Result<u64> {
    if m.is_empty() {
        return domain("at least one message-set size is needed");
    }
    if m.contains(&0) {
        return domain("message-set sizes must be >= 1");
    }
    let mut total: u64 = 1;
    for &x in m {
        total = total.saturating_mul(x as u64);
        if total > MAX_CODEWORDS {
            return Err(guard(format!("more than {MAX_CODEWORDS} codewords requested")));
        }
    }
    Ok(total)
}

/// Products `P_n = M_1 ... M_n` for `n = 0..=N`.
fn prefix_products(m: &[u32]) -> Vec<u64> {
    let mut p = vec![1u64];
    for &x in m {
        p.push(p.last().unwrap() * x as u64);
    }
    p
}

/// Flat index (1-based) of the message tuple `j` (each component 1-based):
/// `j_1 + sum_n M_1 ... M_{n-1} (j_n - 1)`.
pub fn codeword_index(j: &[u32], m: &[u32]) -> Result<u64> {
    if j.len() != m.len() {
        return domain(format!("tuple of length {} for {} message sets", j.len(), m.len()));
    }
    check_sizes(m)?;
    let p = prefix_products(m);
    let mut idx = 1u64;
    for (n, (&jn, &mn)) in j.iter().zip(m).enumerate() {
        if jn < 1 || jn > mn {
            return domain(format!("component {} is {jn}, outside 1..={mn}", n + 1));
        }
        idx += p[n] * (jn as u64 - 1);
    }
    Ok(idx)
}

/// Inverse of [`codeword_index`].
pub fn codeword_tuple(j_flat: u64, m: &[u32]) -> Result<Vec<u32>> {
    let total = check_sizes(m)?;
    if j_flat < 1 || j_flat > total {
        return domain(format!("index {j_flat} outside 1..={total}"));
    }
    let mut rest = j_flat - 1;
    Ok(m.iter()
        .map(|&mn| {
            let d = (rest % mn as u64) as u32 + 1;
            rest /= mn as u64;
            d
        })
        .collect())
}

/// `j'_n` for `n = 0..N`: how many of the codewords with a smaller index
/// share exactly the first `n` blocks with codeword `j_flat`.
pub fn shared_prefix_counts(j_flat: u64, m: &[u32]) -> Result<Vec<u64>> {
    let total = check_sizes(m)?;
    if j_flat < 1 || j_flat > total {
        return domain(format!("index {j_flat} outside 1..={total}"));
    }
    let p = prefix_products(m);
    let k = j_flat - 1;
    Ok((0..m.len()).map(|n| k / p[n] - k / p[n + 1]).collect())
}

/// Tree-structured random codebook. Block `n` of a codeword depends only on
/// the first `n` message components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeCodebook {
    t: u32,
    m: Vec<u32>,
    seed: u64,
    /// `blocks[n][p]` is block `n` for the prefix with index `p`, one bit per
    /// channel use.
    blocks: Vec<Vec<u32>>,
}

/// Draws a codebook: first `M_1` blocks, then `M_{n+1}` blocks under every
/// prefix of length `n`, with i.i.d. uniform bits.
pub fn gen_tree_codebook(seed: u64, t: u32, m: &[u32]) -> Result<TreeCodebook> {
    if t == 0 || t > MAX_T {
        return Err(guard(format!("block length {t} outside 1..={MAX_T}")));
    }
    check_sizes(m)?;
    let mask = if t == 32 { u32::MAX } else { (1u32 << t) - 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = prefix_products(m)[1..]
        .iter()
        .map(|&count| (0..count).map(|_| rng.next_u32() & mask).collect())
        .collect();
    Ok(TreeCodebook {
        t,
        m: m.to_vec(),
        seed,
        blocks,
    })
}

impl TreeCodebook {
    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn sizes(&self) -> &[u32] {
        &self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codewords(&self) -> u64 {
        self.blocks.last().map_or(1, |b| b.len() as u64)
    }

    pub fn stored_blocks(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Block `n` (0-based) under the prefix with index `prefix`, i.e.
    /// `(j_flat - 1) mod M_1 ... M_{n+1}`.
    pub fn block(&self, n: usize, prefix: u64) -> u32 {
        let b = &self.blocks[n];
        b[(prefix % b.len() as u64) as usize]
    }

    pub fn codeword(&self, j_flat: u64) -> Vec<u32> {
        (0..self.blocks.len()).map(|n| self.block(n, j_flat - 1)).collect()
    }
}

/// Passes blocks through the channel: every bit of block `n` flips
/// independently with the crossover of `states[n]`.
pub fn simulate_channel(blocks: &[u32], states: &[State], params: &ChannelParams, rng: &mut impl Rng) -> Vec<u32> {
    blocks
        .iter()
        .zip(states)
        .map(|(&x, &s)| {
            let d = params.delta(s);
            let mut noise = 0u32;
            for b in 0..params.t {
                if rng.gen_bool(d) {
                    noise |= 1 << b;
                }
            }
            x ^ noise
        })
        .collect()
}

/// Densities indexed by state and Hamming distance.
struct DensityTable([Vec<f64>; 2]);

impl DensityTable {
    fn new(params: &ChannelParams) -> Self {
        let row = |s: State| {
            (0..=params.t)
                .map(|k| block_density(params.t, params.delta(s), k))
                .collect()
        };
        DensityTable([row(State::Bad), row(State::Good)])
    }

    #[inline]
    fn get(&self, s: State, x: u32, y: u32) -> f64 {
        self.0[s.index()][(x ^ y).count_ones() as usize]
    }
}

/// Threshold decoder: the lowest index whose density exceeds `gamma`, or
/// `None` (an erasure).
pub fn feinstein_decode(
    y: &[u32],
    states: &[State],
    codebook: &TreeCodebook,
    params: &ChannelParams,
    gamma: f64,
) -> Option<u64> {
    feinstein_with(y, states, codebook, &DensityTable::new(params), gamma)
}

fn feinstein_with(y: &[u32], states: &[State], cb: &TreeCodebook, table: &DensityTable, gamma: f64) -> Option<u64> {
    (1..=cb.codewords()).find(|&j| {
        let i: f64 = (0..y.len())
            .map(|n| table.get(states[n], cb.block(n, j - 1), y[n]))
            .sum();
        i > gamma
    })
}

/// Outcome of one stop-feedback run.
#[derive(Clone, Debug, PartialEq)]
pub struct SfRun {
    /// Block (1-based) at which some tuple first reached its level; `None`
    /// when the horizon was reached.
    pub stop_block: Option<u32>,
    pub decoded: Option<Vec<u32>>,
    pub correct: bool,
}

/// Runs the stop-feedback decoder for message `j_flat` over `levels.len()`
/// blocks. After block `n` every tuple of the first `min(n, N)` components
/// carries its running density; the run stops at the first block where some
/// tuple reaches `levels[n - 1]` and decodes the lexicographically largest
/// such tuple. Reaching the horizon counts as an error.
pub fn emssf_decode_run(
    codebook: &TreeCodebook,
    params: &ChannelParams,
    levels: &[f64],
    states: &[State],
    j_flat: u64,
    rng: &mut impl Rng,
) -> SfRun {
    sf_run(
        codebook,
        params,
        &DensityTable::new(params),
        levels,
        states,
        j_flat,
        rng,
    )
}

fn sf_run(
    cb: &TreeCodebook,
    params: &ChannelParams,
    table: &DensityTable,
    levels: &[f64],
    states: &[State],
    j_flat: u64,
    rng: &mut impl Rng,
) -> SfRun {
    let m = &cb.m;
    let p = prefix_products(m);
    let depth = cb.blocks.len();
    let mut sums: Vec<f64> = vec![0.0];
    for (n, (&level, &s)) in levels.iter().zip(states).enumerate() {
        let width = p[(n + 1).min(m.len())];
        if sums.len() as u64 != width {
            let parents = sums.len();
            sums = (0..width as usize).map(|q| sums[q % parents]).collect();
        }
        let row = n.min(depth - 1);
        let x = cb.block(row, j_flat - 1);
        let y = simulate_channel(&[x], &[s], params, rng)[0];
        for (q, v) in sums.iter_mut().enumerate() {
            *v += table.get(s, cb.block(row, q as u64), y);
        }
        let mut best: Option<Vec<u32>> = None;
        for (q, &v) in sums.iter().enumerate() {
            if v >= level {
                let tup = codeword_tuple(q as u64 + 1, &m[..(n + 1).min(m.len())]).expect("index in range");
                if best.as_ref().is_none_or(|b| tup > *b) {
                    best = Some(tup);
                }
            }
        }
        if let Some(tup) = best {
            let truth = codeword_tuple(j_flat, m).expect("index in range");
            let correct = truth[..tup.len()] == tup[..];
            return SfRun {
                stop_block: Some(n as u32 + 1),
                decoded: Some(tup),
                correct,
            };
        }
    }
    SfRun {
        stop_block: None,
        decoded: None,
        correct: false,
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Ems,
    Emssf,
}

/// Empirical error rate of a run next to the analytic bound it should obey.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialReport {
    pub mode: SimMode,
    pub trials: u64,
    pub errors: u64,
    pub error_rate: f64,
    /// 95% Clopper-Pearson interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean stopping block; horizon runs count as `horizon + 1`.
    pub avg_stop_block: Option<f64>,
    pub stop_block_std_err: Option<f64>,
    /// Analytic mean stopping block.
    pub expected_stop_bound: Option<f64>,
    pub bound_value: f64,
    /// Binomial standard error of `error_rate`.
    pub std_err: f64,
    /// `error_rate <= bound_value + 3 std_err`, and likewise for the mean
    /// stopping block.
    pub pass: bool,
    pub seed: u64,
}

/// Quantile of `Beta(a, b)` by bisection on the regularized incomplete beta
/// function.
fn beta_quantile(a: f64, b: f64, p: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return domain(format!("beta parameters must be positive, got {a}, {b}"));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Two-sided Clopper-Pearson interval for `x` successes in `n` trials.
pub fn clopper_pearson(x: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || x > n {
        return domain(format!("{x} successes in {n} trials"));
    }
    let a = (1.0 - confidence) / 2.0;
    let lo = if x == 0 {
        0.0
    } else {
        beta_quantile(x as f64, (n - x + 1) as f64, a)?
    };
    let hi = if x == n {
        1.0
    } else {
        beta_quantile((x + 1) as f64, (n - x) as f64, 1.0 - a)?
    };
    Ok((lo, hi))
}

fn check_run(params: &ChannelParams, states: &[State], m: &[u32], trials: u64) -> Result<u64> {
    params.validate()?;
    if params.t > MAX_T {
        return Err(guard(format!("block length {} exceeds {MAX_T}", params.t)));
    }
    if trials == 0 || trials > MAX_TRIALS {
        return Err(guard(format!("trial count {trials} outside 1..={MAX_TRIALS}")));
    }
    if states.len() < m.len() {
        return domain(format!("{} states for {} message sets", states.len(), m.len()));
    }
    check_sizes(m)
}

#[derive(Default)]
struct Tally {
    errors: u64,
    stops: u64,
    stops_sq: u64,
}

impl Tally {
    fn merge(a: Tally, b: Tally) -> Tally {
        Tally {
            errors: a.errors + b.errors,
            stops: a.stops + b.stops,
            stops_sq: a.stops_sq + b.stops_sq,
        }
    }
}

fn report(
    mode: SimMode,
    seed: u64,
    trials: u64,
    tally: &Tally,
    bound: f64,
    stop_bound: Option<f64>,
) -> Result<TrialReport> {
    let n = trials as f64;
    let rate = tally.errors as f64 / n;
    let (ci_low, ci_high) = clopper_pearson(tally.errors, trials, 0.95)?;
    let std_err = (rate * (1.0 - rate) / n).sqrt();
    let mut pass = rate <= bound + 3.0 * std_err;
    let (mut avg, mut avg_se) = (None, None);
    if let Some(eb) = stop_bound {
        let mean = tally.stops as f64 / n;
        let var = (tally.stops_sq as f64 / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        pass &= mean <= eb + 3.0 * se;
        avg = Some(mean);
        avg_se = Some(se);
    }
    Ok(TrialReport {
        mode,
        trials,
        errors: tally.errors,
        error_rate: rate,
        ci_low,
        ci_high,
        avg_stop_block: avg,
        stop_block_std_err: avg_se,
        expected_stop_bound: stop_bound,
        bound_value: bound,
        std_err,
        pass,
        seed,
    })
}

fn draw_codebook(seed: u64, trial: u64, t: u32, m: &[u32]) -> Result<(TreeCodebook, u64)> {
    let seed_cb = trial_rng(seed, trial, CODEBOOK_REGION).next_u64();
    let cb = gen_tree_codebook(seed_cb, t, m)?;
    let j = trial_rng(seed, trial, MESSAGE_REGION).gen_range(1..=cb.codewords());
    Ok((cb, j))
}

/// Feinstein-decoder trials of the expanding-message-set code with sizes `m`
/// over `states`, one block per size. `gamma` defaults to `ln((M - 1)/2)`;
/// the reported bound is the dependence-testing bound at that threshold.
pub fn simulate_ems(
    params: &ChannelParams,
    states: &[State],
    m: &[u32],
    gamma: Option<f64>,
    trials: u64,
    seed: u64,
) -> Result<TrialReport> {
    let total = check_run(params, states, m, trials)?;
    if states.len() != m.len() {
        return domain(format!("{} states for {} message sets", states.len(), m.len()));
    }
    let gamma = gamma.unwrap_or_else(|| ((total as f64 - 1.0) / 2.0).ln());
    let sched = MessageSchedule::from_sizes(&m.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
    let bound = if total == 1 && gamma == f64::NEG_INFINITY {
        0.0
    } else {
        ems_bound_thm1_at(params, states, &sched, gamma, Engine::Exact)?.epsilon_bound
    };
    let table = DensityTable::new(params);
    let tally = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Tally> {
            let (cb, j) = draw_codebook(seed, trial, params.t, m)?;
            let mut rng = trial_rng(seed, trial, NOISE_REGION);
            let y = simulate_channel(&cb.codeword(j), states, params, &mut rng);
            let wrong = feinstein_with(&y, states, &cb, &table, gamma) != Some(j);
            Ok(Tally {
                errors: wrong as u64,
                ..Tally::default()
            })
        })
        .try_reduce(Tally::default, |a, b| Ok(Tally::merge(a, b)))?;
    report(SimMode::Ems, seed, trials, &tally, bound, None)
}

/// Threshold increments that keep every stop at `epsilon`: `gamma_k` is the
/// smallest value with `W_k <= epsilon`, so the cumulative level stays flat
/// once no new messages arrive.
pub fn flat_gammas(m: &[u32], horizon: usize, epsilon: f64) -> Vec<f64> {
    let ln_m: Vec<f64> = m.iter().map(|&x| (x as f64).ln()).collect();
    flat_gammas_ln(&ln_m, horizon, epsilon)
}

/// Stop-feedback trials of the code with sizes `m` and the flat levels of
/// [`flat_gammas`]; `states` sets the horizon. The reported bound is the
/// loosened bound plus the probability of running past the horizon, which
/// the simulation counts as an error.
pub fn simulate_emssf(
    params: &ChannelParams,
    states: &[State],
    m: &[u32],
    epsilon: f64,
    trials: u64,
    seed: u64,
) -> Result<TrialReport> {
    check_run(params, states, m, trials)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return domain(format!("epsilon must lie in (0, 1), got {epsilon}"));
    }
    let h = states.len();
    let gammas = flat_gammas(m, h, epsilon);
    let sched = MessageSchedule::from_sizes(&m.iter().map(|&x| x as f64).collect::<Vec<_>>())?.with_gamma(gammas)?;
    let lb = emssf_bound_loosened(params, states, &sched, Engine::Exact)?;
    let bound = lb.epsilon_bound + lb.stop.tail_prob;
    let mut sizes = m.to_vec();
    sizes.resize(h, 1);
    let table = DensityTable::new(params);
    let tally = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Tally> {
            let (cb, j) = draw_codebook(seed, trial, params.t, &sizes)?;
            let mut rng = trial_rng(seed, trial, NOISE_REGION);
            let run = sf_run(&cb, params, &table, &lb.levels, states, j, &mut rng);
            let stop = run.stop_block.unwrap_or(h as u32 + 1) as u64;
            Ok(Tally {
                errors: !run.correct as u64,
                stops: stop,
                stops_sq: stop * stop,
            })
        })
        .try_reduce(Tally::default, |a, b| Ok(Tally::merge(a, b)))?;
    report(SimMode::Emssf, seed, trials, &tally, bound, Some(lb.expected_blocks))
}
