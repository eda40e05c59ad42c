//! Operating points of the five transmission schemes, averaged over fading.
//!
//! Every variable-length scheme is a policy on the tree of fading prefixes:
//! at each node it picks the next message-set factor, and once the state of
//! the block is revealed it either terminates or continues. Expectations are
//! exact sums over the tree; mass below `p_min` or beyond the horizon is
//! charged to error as `truncation_gap` and counted at the horizon length.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{beta_expansion, bisect_last_ok, gamma_step, next_ln_weight, BoundContext, Engine, Epoch};
use crate::channel::{normal_approx_rate, ChannelParams, State};
use crate::dist::{LatticeWalk, LevelQuery, WalkKernel};
use crate::error::{domain, Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fixed,
    Vld,
    Vlsf,
    BrqCsit,
    BrqSf,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Fixed, Scheme::Vld, Scheme::Vlsf, Scheme::BrqCsit, Scheme::BrqSf];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fixed => "fixed",
            Scheme::Vld => "vld",
            Scheme::Vlsf => "vlsf",
            Scheme::BrqCsit => "brq_csit",
            Scheme::BrqSf => "brq_sf",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::Usage(format!("unknown scheme '{s}'")))
    }
}

/// A realized fading prefix and its probability.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateSequence {
    pub states: Vec<State>,
    pub prob: f64,
}

impl StateSequence {
    pub fn new(states: Vec<State>, q: f64) -> Self {
        let prob = states
            .iter()
            .map(|s| match s {
                State::Good => q,
                State::Bad => 1.0 - q,
            })
            .product();
        StateSequence { states, prob }
    }
}

/// Knobs shared by the variable-length schemes.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub horizon: u32,
    pub p_min: f64,
    pub max_expansions: u32,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            epsilon: 1e-3,
            beta: 0.9,
            horizon: 20,
            p_min: 1e-9,
            max_expansions: 5,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return domain(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return domain(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if self.horizon == 0 {
            return domain("horizon must be at least 1");
        }
        if !(0.0..1.0).contains(&self.p_min) {
            return domain(format!("p_min must lie in [0, 1), got {}", self.p_min));
        }
        Ok(())
    }
}

/// One evaluated operating point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeCurvePoint {
    pub scheme: Scheme,
    /// `ln M_1`.
    pub ln_m1: f64,
    pub epsilon_target: f64,
    pub avg_blocks: f64,
    pub avg_blocklength: f64,
    /// `E[sum_n ln M_n]` over decoded messages.
    pub avg_nats: f64,
    pub rate_bits: f64,
    pub eps_certified: f64,
    pub truncation_gap: f64,
    pub expansions_cap: u32,
}

impl SchemeCurvePoint {
    /// `M_1` as `(mantissa, decimal exponent)`.
    pub fn m1_decimal(&self) -> (f64, i64) {
        let l10 = self.ln_m1 / std::f64::consts::LN_10;
        let e = l10.floor();
        (10f64.powf(l10 - e), e as i64)
    }
}

/// One terminating event of the fading tree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub weight: f64,
    pub blocks: u32,
    pub nats: f64,
    /// Error bound certified at termination.
    pub bound: f64,
}

/// What happens after one block in a given state.
#[derive(Clone, Debug)]
pub struct Branch<N> {
    /// `(fraction, nats, bound)` of the branch mass that terminates.
    pub stops: Vec<(f64, f64, f64)>,
    /// Fraction lost to numerical pruning.
    pub lost: f64,
    pub next: Option<N>,
}

impl<N> Branch<N> {
    fn stop(nats: f64, bound: f64) -> Self {
        Branch {
            stops: vec![(1.0, nats, bound)],
            lost: 0.0,
            next: None,
        }
    }

    fn go(next: N) -> Self {
        Branch {
            stops: vec![],
            lost: 0.0,
            next: Some(next),
        }
    }
}

/// A per-prefix decision rule.
pub trait FadingPolicy {
    type Node;
    type Key: Eq + Hash + Clone;

    fn root(&mut self) -> Result<Self::Node>;
    /// Nodes with equal keys are interchangeable and are merged.
    fn key(&self, node: &Self::Node) -> Self::Key;
    /// Probability, given the prefix, that the node is still running.
    fn live_mass(&self, _node: &Self::Node) -> f64 {
        1.0
    }
    /// Sends block `depth + 1`; returns the branch for each state flagged in
    /// `need` (indexed by [`State::index`]).
    fn expand(&mut self, node: &Self::Node, depth: u32, need: [bool; 2]) -> Result<[Option<Branch<Self::Node>>; 2]>;
}

/// Weighted outcomes of a tree enumeration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeSummary {
    pub outcomes: Vec<Outcome>,
    /// Mass pruned below `p_min` or lost numerically.
    pub pruned_mass: f64,
    /// Mass still running at the horizon.
    pub horizon_mass: f64,
    pub horizon: u32,
}

impl TreeSummary {
    pub fn truncation_gap(&self) -> f64 {
        self.pruned_mass + self.horizon_mass
    }

    pub fn total_mass(&self) -> f64 {
        self.outcomes.iter().map(|o| o.weight).sum::<f64>() + self.truncation_gap()
    }

    fn point(&self, scheme: Scheme, params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> SchemeCurvePoint {
        let gap = self.truncation_gap();
        let h = self.horizon as f64;
        let blocks = self.outcomes.iter().map(|o| o.weight * o.blocks as f64).sum::<f64>() + gap * h;
        let nats: f64 = self.outcomes.iter().map(|o| o.weight * o.nats).sum();
        let worst = self.outcomes.iter().map(|o| o.bound).fold(0.0, f64::max);
        curve_point(scheme, params, ln_m1, cfg, blocks, nats, worst + gap, gap)
    }
}

#[allow(clippy::too_many_arguments)]
fn curve_point(
    scheme: Scheme,
    params: &ChannelParams,
    ln_m1: f64,
    cfg: &SchemeConfig,
    avg_blocks: f64,
    avg_nats: f64,
    eps_certified: f64,
    gap: f64,
) -> SchemeCurvePoint {
    let avg_blocklength = avg_blocks * params.t as f64;
    // sums of zero contributions may come out as -0
    let avg_nats = avg_nats + 0.0;
    SchemeCurvePoint {
        scheme,
        ln_m1,
        epsilon_target: cfg.epsilon,
        avg_blocks,
        avg_blocklength,
        avg_nats,
        rate_bits: avg_nats / (LN_2 * avg_blocklength),
        eps_certified: eps_certified.min(1.0),
        truncation_gap: gap.min(1.0),
        expansions_cap: cfg.max_expansions,
    }
}

/// Level-by-level enumeration of fading prefixes, branching on the state of
/// each block with probabilities `1 - q` and `q`. Nodes with equal keys are
/// merged; branches whose joint mass falls below `p_min` are dropped into
/// `pruned_mass`. Order of outcomes is deterministic.
pub fn enumerate_fading_tree<P: FadingPolicy>(
    params: &ChannelParams,
    policy: &mut P,
    horizon: u32,
    p_min: f64,
) -> Result<TreeSummary> {
    params.validate()?;
    if horizon == 0 {
        return domain("horizon must be at least 1");
    }
    if !(0.0..1.0).contains(&p_min) {
        return domain(format!("p_min must lie in [0, 1), got {p_min}"));
    }
    let probs = [1.0 - params.q, params.q];
    let need = [probs[0] > 0.0, probs[1] > 0.0];
    let mut outcomes = Vec::new();
    let mut pruned = 0.0;
    let mut level: Vec<(f64, P::Node)> = vec![(1.0, policy.root()?)];
    for depth in 0..horizon {
        let mut next: Vec<(f64, P::Node)> = Vec::new();
        let mut index: HashMap<P::Key, usize> = HashMap::new();
        for (w, node) in &level {
            let branches = policy.expand(node, depth, need)?;
            for (s, br) in branches.into_iter().enumerate() {
                let Some(br) = br else { continue };
                let bw = w * probs[s];
                for (frac, nats, bound) in br.stops {
                    if frac > 0.0 {
                        outcomes.push(Outcome {
                            weight: bw * frac,
                            blocks: depth + 1,
                            nats,
                            bound,
                        });
                    }
                }
                pruned += bw * br.lost;
                let Some(child) = br.next else { continue };
                let joint = bw * policy.live_mass(&child);
                if joint < p_min {
                    pruned += joint;
                    continue;
                }
                let key = policy.key(&child);
                match index.get(&key) {
                    Some(&i) => next[i].0 += bw,
                    None => {
                        index.insert(key, next.len());
                        next.push((bw, child));
                    }
                }
            }
        }
        level = next;
        if level.is_empty() {
            break;
        }
    }
    let horizon_mass = level.iter().map(|(w, n)| w * policy.live_mass(n)).sum();
    Ok(TreeSummary {
        outcomes,
        pruned_mass: pruned,
        horizon_mass,
        horizon,
    })
}

fn check_m1(ln_m1: f64) -> Result<()> {
    if !(ln_m1 >= 0.0 && ln_m1.is_finite()) {
        return domain(format!("ln M1 must be finite and >= 0, got {ln_m1}"));
    }
    Ok(())
}

/// Fixed-length code over `n_blocks` blocks at the normal-approximation rate.
pub fn scheme_fixed(params: &ChannelParams, n_blocks: u32, epsilon: f64) -> Result<SchemeCurvePoint> {
    if n_blocks == 0 {
        return domain("n_blocks must be at least 1");
    }
    let n = n_blocks as f64 * params.t as f64;
    let rate = normal_approx_rate(params, n, epsilon)?;
    let nats = rate * LN_2 * n;
    let cfg = SchemeConfig {
        epsilon,
        max_expansions: 0,
        ..SchemeConfig::default()
    };
    Ok(curve_point(
        Scheme::Fixed,
        params,
        nats.max(0.0),
        &cfg,
        n_blocks as f64,
        nats,
        epsilon,
        0.0,
    ))
}

fn states_from_counts(c: [u32; 2]) -> Vec<State> {
    let mut v = vec![State::Bad; c[0] as usize];
    v.extend(std::iter::repeat_n(State::Good, c[1] as usize));
    v
}

fn bump(mut c: [u32; 2], s: usize) -> [u32; 2] {
    c[s] += 1;
    c
}

fn state_of(i: usize) -> State {
    if i == 0 {
        State::Bad
    } else {
        State::Good
    }
}

/// Segments of a backtrack-retransmission codebook: `(ln M, block counts)`,
/// where each segment starts with an expansion and continues with pure
/// incremental redundancy.
type Segments = Vec<(f64, [u32; 2])>;

struct Thm1Cache {
    ctx: BoundContext,
    memo: HashMap<Vec<(u64, [u32; 2])>, f64>,
}

impl Thm1Cache {
    fn new(params: &ChannelParams) -> Result<Self> {
        Ok(Thm1Cache {
            ctx: BoundContext::new(params, Engine::Exact)?,
            memo: HashMap::new(),
        })
    }

    fn eval(&mut self, segs: &[(f64, [u32; 2])]) -> Result<f64> {
        let key: Vec<(u64, [u32; 2])> = segs.iter().map(|(l, c)| (l.to_bits(), *c)).collect();
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let epochs: Vec<Epoch> = segs
            .iter()
            .map(|&(ln_m, c)| Epoch {
                ln_m,
                states: states_from_counts(c),
            })
            .collect();
        let v = self.ctx.thm1(&epochs)?.epsilon_bound;
        self.memo.insert(key, v);
        Ok(v)
    }
}

struct VldPolicy {
    ln_m1: f64,
    eps: f64,
    bounds: Thm1Cache,
}

impl FadingPolicy for VldPolicy {
    type Node = [u32; 2];
    type Key = [u32; 2];

    fn root(&mut self) -> Result<[u32; 2]> {
        Ok([0, 0])
    }

    fn key(&self, node: &[u32; 2]) -> [u32; 2] {
        *node
    }

    fn expand(&mut self, node: &[u32; 2], _depth: u32, need: [bool; 2]) -> Result<[Option<Branch<[u32; 2]>>; 2]> {
        let mut out = [None, None];
        for s in 0..2 {
            if !need[s] {
                continue;
            }
            let c = bump(*node, s);
            let b = self.bounds.eval(&[(self.ln_m1, c)])?;
            out[s] = Some(if b <= self.eps {
                Branch::stop(self.ln_m1, b)
            } else {
                Branch::go(c)
            });
        }
        Ok(out)
    }
}

/// Variable-length code with delayed state knowledge: one message, sent
/// until the dependence-testing bound over the realized states reaches
/// `epsilon`.
pub fn scheme_vld(params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> Result<SchemeCurvePoint> {
    cfg.validate()?;
    check_m1(ln_m1)?;
    let mut policy = VldPolicy {
        ln_m1,
        eps: cfg.epsilon,
        bounds: Thm1Cache::new(params)?,
    };
    let tree = enumerate_fading_tree(params, &mut policy, cfg.horizon, cfg.p_min)?;
    Ok(tree.point(Scheme::Vld, params, ln_m1, cfg))
}

#[derive(Clone, Debug)]
struct CsitNode {
    segs: Segments,
    expansions: u32,
}

struct CsitPolicy {
    ln_m1: f64,
    eps: f64,
    cap: u32,
    t: u32,
    bounds: Thm1Cache,
}

impl CsitPolicy {
    fn decide(&mut self, node: &CsitNode) -> Result<f64> {
        if node.expansions >= self.cap {
            return Ok(0.0);
        }
        let mut hyp = node.segs.clone();
        let last = hyp.len() - 1;
        hyp[last].1[1] += 1;
        if self.bounds.eval(&hyp)? > self.eps {
            return Ok(0.0);
        }
        let blocks: u32 = node.segs.iter().map(|(_, c)| c[0] + c[1]).sum::<u32>() + 1;
        let upper = (blocks as f64 * self.t as f64 + 1.0) * LN_2;
        let mut trial = node.segs.clone();
        trial.push((0.0, [0, 1]));
        let eps = self.eps;
        let bounds = &mut self.bounds;
        bisect_last_ok(upper, |x| {
            trial.last_mut().unwrap().0 = x;
            Ok(bounds.eval(&trial)? <= eps)
        })
    }
}

impl FadingPolicy for CsitPolicy {
    type Node = CsitNode;
    type Key = (Vec<(u64, [u32; 2])>, u32);

    fn root(&mut self) -> Result<CsitNode> {
        Ok(CsitNode {
            segs: vec![],
            expansions: 0,
        })
    }

    fn key(&self, n: &CsitNode) -> Self::Key {
        (n.segs.iter().map(|(l, c)| (l.to_bits(), *c)).collect(), n.expansions)
    }

    fn expand(&mut self, node: &CsitNode, depth: u32, need: [bool; 2]) -> Result<[Option<Branch<CsitNode>>; 2]> {
        let ln_mk = if depth == 0 { self.ln_m1 } else { self.decide(node)? };
        let mut out = [None, None];
        for s in 0..2 {
            if !need[s] {
                continue;
            }
            let mut child = node.clone();
            if depth == 0 || ln_mk > 0.0 {
                child.segs.push((ln_mk, bump([0, 0], s)));
                if depth > 0 {
                    child.expansions += 1;
                }
            } else {
                let last = child.segs.len() - 1;
                child.segs[last].1[s] += 1;
            }
            let b = self.bounds.eval(&child.segs)?;
            out[s] = Some(if b <= self.eps {
                Branch::stop(child.segs.iter().map(|(l, _)| l).sum(), b)
            } else {
                Branch::go(child)
            });
        }
        Ok(out)
    }
}

/// Backtrack retransmission with delayed state knowledge.
///
/// Before each block the transmitter asks whether a good block would make
/// the current codebook decodable. If so, it expands the message set by the
/// largest factor that keeps the bound at `epsilon` under that hypothesis;
/// otherwise it sends pure incremental redundancy. It terminates as soon as
/// the bound over the realized states is at most `epsilon`.
pub fn scheme_brq_csit(params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> Result<SchemeCurvePoint> {
    cfg.validate()?;
    check_m1(ln_m1)?;
    let mut policy = CsitPolicy {
        ln_m1,
        eps: cfg.epsilon,
        cap: cfg.max_expansions,
        t: params.t,
        bounds: Thm1Cache::new(params)?,
    };
    let tree = enumerate_fading_tree(params, &mut policy, cfg.horizon, cfg.p_min)?;
    Ok(tree.point(Scheme::BrqCsit, params, ln_m1, cfg))
}

/// Stop-feedback code with a single message: the receiver stops at the
/// first block where the running density reaches `ln((M_1 - 1)/epsilon)`.
///
/// Since the level does not depend on the states, the state-averaged walk is
/// propagated directly, one sub-walk per number of bad blocks.
pub fn scheme_vlsf(params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> Result<SchemeCurvePoint> {
    cfg.validate()?;
    check_m1(ln_m1)?;
    let kern = WalkKernel::new(params);
    let gamma = gamma_step(f64::NEG_INFINITY, ln_m1, cfg.epsilon);
    let weight = next_ln_weight(f64::NEG_INFINITY, ln_m1, gamma).exp();
    let probs = [1.0 - params.q, params.q];
    // walks[n0]: joint law of the running density and `n0` bad blocks so far
    let mut walks: Vec<Option<LatticeWalk>> = vec![Some(LatticeWalk::point())];
    let mut stopped_total = 0.0;
    let mut blocks = 0.0;
    for k in 1..=cfg.horizon {
        let mut next = Vec::with_capacity(walks.len() + 1);
        for n0 in 0..=walks.len() {
            let mut parts: Vec<(LatticeWalk, f64)> = Vec::with_capacity(2);
            if let Some(Some(w)) = n0.checked_sub(1).map(|i| &walks[i]) {
                if probs[0] > 0.0 {
                    parts.push((w.advance(&kern, State::Bad), probs[0]));
                }
            }
            if let Some(Some(w)) = walks.get(n0) {
                if probs[1] > 0.0 {
                    parts.push((w.advance(&kern, State::Good), probs[1]));
                }
            }
            if parts.is_empty() {
                next.push(None);
                continue;
            }
            let refs: Vec<(&LatticeWalk, f64)> = parts.iter().map(|(w, p)| (w, *p)).collect();
            let mut w = LatticeWalk::weighted_sum(&refs)?;
            let s = w.split_at_level(&kern, gamma);
            stopped_total += s;
            blocks += k as f64 * s;
            next.push(Some(w));
        }
        walks = next;
        let live: f64 = walks.iter().flatten().map(|w| w.mass()).sum();
        if live == 0.0 || live < cfg.p_min {
            break;
        }
    }
    // running, pruned and cut-off mass alike
    let gap = (1.0 - stopped_total).max(0.0);
    let worst = if stopped_total > 0.0 { weight } else { 0.0 };
    Ok(curve_point(
        Scheme::Vlsf,
        params,
        ln_m1,
        cfg,
        blocks + gap * cfg.horizon as f64,
        ln_m1 * stopped_total,
        worst + gap,
        gap,
    ))
}

#[derive(Clone, Debug)]
struct SfNode {
    walk: LatticeWalk,
    level: f64,
    ln_w: f64,
    nats: f64,
    expansions: u32,
    pristine: bool,
    path: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum SfKey {
    Pristine([u32; 2], u64, u64, u64, u32),
    Path(Vec<u8>),
}

struct SfPolicy {
    ln_m1: f64,
    eps: f64,
    beta: f64,
    cap: u32,
    t: u32,
    kern: WalkKernel,
    /// Largest conditional stop probability on a hypothesized good block
    /// after an expansion, over the whole tree.
    worst_expanded_stop: f64,
}

impl FadingPolicy for SfPolicy {
    type Node = SfNode;
    type Key = SfKey;

    fn root(&mut self) -> Result<SfNode> {
        Ok(SfNode {
            walk: LatticeWalk::point(),
            level: 0.0,
            ln_w: f64::NEG_INFINITY,
            nats: 0.0,
            expansions: 0,
            pristine: true,
            path: vec![],
        })
    }

    fn key(&self, n: &SfNode) -> SfKey {
        if n.pristine {
            SfKey::Pristine(
                n.walk.counts(),
                n.level.to_bits(),
                n.ln_w.to_bits(),
                n.nats.to_bits(),
                n.expansions,
            )
        } else {
            SfKey::Path(n.path.clone())
        }
    }

    fn live_mass(&self, n: &SfNode) -> f64 {
        n.walk.mass()
    }

    fn expand(&mut self, node: &SfNode, depth: u32, need: [bool; 2]) -> Result<[Option<Branch<SfNode>>; 2]> {
        let live = node.walk.mass();
        let mut good = None;
        let ln_mk = if depth == 0 {
            self.ln_m1
        } else if node.expansions < self.cap && self.beta < 1.0 {
            let g = node.walk.advance(&self.kern, State::Good);
            let query = LevelQuery::new(&g, &self.kern);
            let upper = ((depth + 1) as f64 * self.t as f64 + 1.0) * LN_2 - self.eps.ln();
            let x = beta_expansion(&query, live, node.level, node.ln_w, self.beta, self.eps, upper);
            if x > 0.0 {
                let p = query.mass_at_or_above(node.level + gamma_step(node.ln_w, x, self.eps)) / live;
                self.worst_expanded_stop = self.worst_expanded_stop.max(p);
            }
            good = Some(g);
            x
        } else {
            0.0
        };
        let gamma = gamma_step(node.ln_w, ln_mk, self.eps);
        let level = node.level + gamma;
        let ln_w = next_ln_weight(node.ln_w, ln_mk, gamma);
        let nats = node.nats + ln_mk;
        let expansions = node.expansions + u32::from(depth > 0 && ln_mk > 0.0);
        let bound = ln_w.exp();
        let mut out = [None, None];
        for s in 0..2 {
            if !need[s] {
                continue;
            }
            let mut walk = match (&good, s) {
                (Some(g), 1) => g.clone(),
                _ => node.walk.advance(&self.kern, state_of(s)),
            };
            let stopped = walk.split_at_level(&self.kern, level);
            let lost = walk.pruned() - node.walk.pruned();
            let mut path = node.path.clone();
            path.push(s as u8);
            let next = (walk.mass() > 0.0).then_some(SfNode {
                walk,
                level,
                ln_w,
                nats,
                expansions,
                pristine: node.pristine && stopped == 0.0,
                path,
            });
            out[s] = Some(Branch {
                stops: vec![(stopped, nats, bound)],
                lost,
                next,
            });
        }
        Ok(out)
    }
}

/// Backtrack retransmission with stop feedback.
///
/// Before each block the transmitter evaluates the probability that the
/// receiver stops on it if it is good and no new messages are added. When
/// that exceeds `beta` the message set is expanded by the smallest factor
/// bringing it down to `beta`. Each threshold increment is the smallest one
/// keeping the stop-time bound at `epsilon`.
pub fn scheme_brq_sf(params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> Result<SchemeCurvePoint> {
    Ok(brq_sf_detail(params, ln_m1, cfg)?.0)
}

/// [`scheme_brq_sf`] plus the largest conditional stop probability seen on
/// an expanded block.
pub fn brq_sf_detail(params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> Result<(SchemeCurvePoint, f64)> {
    cfg.validate()?;
    check_m1(ln_m1)?;
    let mut policy = SfPolicy {
        ln_m1,
        eps: cfg.epsilon,
        beta: cfg.beta,
        cap: cfg.max_expansions,
        t: params.t,
        kern: WalkKernel::new(params),
        worst_expanded_stop: 0.0,
    };
    let tree = enumerate_fading_tree(params, &mut policy, cfg.horizon, cfg.p_min)?;
    Ok((
        tree.point(Scheme::BrqSf, params, ln_m1, cfg),
        policy.worst_expanded_stop,
    ))
}

/// Evaluates one variable-length scheme.
pub fn evaluate(scheme: Scheme, params: &ChannelParams, ln_m1: f64, cfg: &SchemeConfig) -> Result<SchemeCurvePoint> {
    match scheme {
        Scheme::Fixed => domain("the fixed-length scheme is indexed by blocks, not by M1"),
        Scheme::Vld => scheme_vld(params, ln_m1, cfg),
        Scheme::Vlsf => scheme_vlsf(params, ln_m1, cfg),
        Scheme::BrqCsit => scheme_brq_csit(params, ln_m1, cfg),
        Scheme::BrqSf => scheme_brq_sf(params, ln_m1, cfg),
    }
}

/// `points` values of `ln M_1`, log-uniform in `M_1` between `2^lo_bits` and
/// `2^hi_bits`.
pub fn ln_m1_grid(lo_bits: f64, hi_bits: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo_bits * LN_2],
        n => (0..n)
            .map(|i| (lo_bits + (hi_bits - lo_bits) * i as f64 / (n - 1) as f64) * LN_2)
            .collect(),
    }
}

/// One sweep job. `x` is `ln M_1`, or the block count for the fixed scheme.
/// A failed evaluation keeps its row with the error message.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scheme: Scheme,
    pub x: f64,
    pub point: std::result::Result<SchemeCurvePoint, String>,
}

/// Evaluates every requested scheme over the grid. Fixed-length points are
/// taken at `1..=horizon` blocks. Rows come back sorted by scheme, then by
/// `x`, whatever the number of threads.
pub fn sweep(params: &ChannelParams, cfg: &SchemeConfig, schemes: &[Scheme], grid: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    params.validate()?;
    let mut jobs: Vec<(Scheme, f64)> = Vec::new();
    for &s in schemes {
        if s == Scheme::Fixed {
            jobs.extend((1..=cfg.horizon).map(|n| (s, n as f64)));
        } else {
            jobs.extend(grid.iter().map(|&x| (s, x)));
        }
    }
    jobs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    jobs.dedup();
    Ok(jobs
        .par_iter()
        .map(|&(scheme, x)| {
            let point = match scheme {
                Scheme::Fixed => scheme_fixed(params, x as u32, cfg.epsilon),
                _ => evaluate(scheme, params, x, cfg),
            };
            SweepRow {
                scheme,
                x,
                point: point.map_err(|e| e.to_string()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(t: u32) -> ChannelParams {
        ChannelParams::new(0.30, 0.05, 0.6, t).unwrap()
    }

    struct StopOnGood;

    impl FadingPolicy for StopOnGood {
        type Node = ();
        type Key = ();
        fn root(&mut self) -> Result<()> {
            Ok(())
        }
        fn key(&self, _: &()) {}
        fn expand(&mut self, _: &(), _: u32, need: [bool; 2]) -> Result<[Option<Branch<()>>; 2]> {
            Ok([need[0].then(|| Branch::go(())), need[1].then(|| Branch::stop(1.0, 0.0))])
        }
    }

    struct StopAfterOne;

    impl FadingPolicy for StopAfterOne {
        type Node = ();
        type Key = ();
        fn root(&mut self) -> Result<()> {
            Ok(())
        }
        fn key(&self, _: &()) {}
        fn expand(&mut self, _: &(), _: u32, need: [bool; 2]) -> Result<[Option<Branch<()>>; 2]> {
            Ok([
                need[0].then(|| Branch::stop(0.0, 0.0)),
                need[1].then(|| Branch::stop(0.0, 0.0)),
            ])
        }
    }

    #[test]
    fn geometric_tree() {
        let p = reference(4);
        let s = enumerate_fading_tree(&p, &mut StopOnGood, 3, 0.0).unwrap();
        let w: Vec<f64> = s.outcomes.iter().map(|o| o.weight).collect();
        let expected = [0.6, 0.24, 0.096];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s.horizon_mass - 0.064).abs() < 1e-15);
        assert!((s.total_mass() - 1.0).abs() < 1e-12);

        let s = enumerate_fading_tree(&p, &mut StopAfterOne, 5, 0.0).unwrap();
        assert_eq!(s.outcomes.len(), 2);
        assert!((s.outcomes[0].weight - 0.4).abs() < 1e-15);
        assert!((s.outcomes[1].weight - 0.6).abs() < 1e-15);

        let always_good = ChannelParams::new(0.3, 0.05, 1.0, 4).unwrap();
        let s = enumerate_fading_tree(&always_good, &mut StopOnGood, 3, 0.0).unwrap();
        assert_eq!(s.outcomes.len(), 1);
        assert_eq!(s.outcomes[0].weight, 1.0);
    }

    #[test]
    fn state_sequence_probability() {
        let s = StateSequence::new(vec![State::Good, State::Bad, State::Good], 0.6);
        assert!((s.prob - 0.6 * 0.4 * 0.6).abs() < 1e-16);
    }

    #[test]
    fn fixed_scheme_examples() {
        let p = reference(100);
        let c = crate::channel::capacity(&p);
        assert!((scheme_fixed(&p, 3, 0.5).unwrap().rate_bits - c).abs() < 1e-12);
        let r: Vec<f64> = (1..8).map(|n| scheme_fixed(&p, n, 1e-3).unwrap().rate_bits).collect();
        assert!(r.windows(2).all(|w| w[1] > w[0]));
        let pt = scheme_fixed(&p, 10, 1e-3).unwrap();
        let direct = normal_approx_rate(&p, 1000.0, 1e-3).unwrap();
        assert!((pt.rate_bits - direct).abs() < 1e-12);
        assert_eq!(pt.avg_blocks, 10.0);
    }

    #[test]
    fn vld_small_message_interpolates() {
        // ln M1 chosen so one good block suffices but one bad does not
        let p = reference(32);
        let cfg = SchemeConfig::default();
        let ctx = BoundContext::new(&p, Engine::Exact).unwrap();
        let mut ln_m1 = 0.5;
        let ok = |x: f64, s: State| ctx.dt(&[s], x).unwrap().epsilon_bound <= cfg.epsilon;
        while !(ok(ln_m1, State::Good) && !ok(ln_m1, State::Bad)) {
            ln_m1 += 0.25;
            assert!(ln_m1 < 20.0);
        }
        let pt = scheme_vld(&p, ln_m1, &cfg).unwrap();
        // good first block stops at once, bad first block needs at least one more
        assert!(pt.avg_blocks >= 2.0 - p.q - 1e-12);
        let one_bad = SchemeConfig { horizon: 2, ..cfg };
        let two = scheme_vld(&p, ln_m1, &one_bad).unwrap();
        assert!(two.avg_blocks <= 2.0 - p.q + 1e-12 + two.truncation_gap * 2.0);
        assert!(pt.eps_certified <= cfg.epsilon + pt.truncation_gap);
        // M1 = 1 stops at once and carries nothing
        let one = scheme_vld(&p, 0.0, &cfg).unwrap();
        assert_eq!(one.avg_blocks, 1.0);
        assert_eq!(one.rate_bits, 0.0);
    }

    #[test]
    fn csit_without_expansions_is_vld() {
        for (d0, d1) in [(0.3, 0.05), (0.2, 0.2)] {
            let p = ChannelParams::new(d0, d1, 0.6, 16).unwrap();
            let cfg = SchemeConfig {
                max_expansions: 0,
                horizon: 10,
                ..SchemeConfig::default()
            };
            for ln_m1 in [3.0, 8.0, 20.0] {
                let a = scheme_vld(&p, ln_m1, &cfg).unwrap();
                let b = scheme_brq_csit(&p, ln_m1, &cfg).unwrap();
                assert_eq!(a.avg_blocks, b.avg_blocks);
                assert_eq!(a.avg_nats, b.avg_nats);
                assert_eq!(a.eps_certified, b.eps_certified);
            }
        }
    }

    #[test]
    fn csit_terminates_on_good_first_block() {
        let p = ChannelParams::new(0.3, 0.05, 1.0, 48).unwrap();
        let cfg = SchemeConfig::default();
        let pt = scheme_brq_csit(&p, 2.0, &cfg).unwrap();
        assert_eq!(pt.avg_blocks, 1.0);
        assert!((pt.avg_nats - 2.0).abs() < 1e-15);
        let v = scheme_vld(&p, 2.0, &cfg).unwrap();
        assert_eq!(
            pt,
            SchemeCurvePoint {
                scheme: Scheme::BrqCsit,
                ..v
            }
        );
    }

    #[test]
    fn vlsf_examples() {
        let cfg = SchemeConfig::default();
        // noiseless blocks carry exactly T ln 2; a level below that stops at once
        let clean = ChannelParams::new(0.0, 0.0, 0.6, 16).unwrap();
        let ln_m1 = 50f64.ln();
        let pt = scheme_vlsf(&clean, ln_m1, &cfg).unwrap();
        assert_eq!(pt.avg_blocks, 1.0);
        assert!((pt.rate_bits - ln_m1 / (16.0 * LN_2)).abs() < 1e-15);
        let p = reference(16);
        let pt = scheme_vlsf(&p, 12.0, &cfg).unwrap();
        assert!((pt.eps_certified - pt.truncation_gap - cfg.epsilon).abs() < 1e-15);
        assert!(pt.avg_blocks > 1.0);
    }

    #[test]
    fn brq_sf_with_unit_beta_is_vlsf() {
        let p = reference(8);
        let cfg = SchemeConfig {
            beta: 1.0,
            horizon: 10,
            p_min: 0.0,
            ..SchemeConfig::default()
        };
        for ln_m1 in [2.0, 6.0, 12.0] {
            let a = scheme_vlsf(&p, ln_m1, &cfg).unwrap();
            let b = scheme_brq_sf(&p, ln_m1, &cfg).unwrap();
            assert!(
                (a.avg_blocks - b.avg_blocks).abs() < 1e-12,
                "{} vs {}",
                a.avg_blocks,
                b.avg_blocks
            );
            assert!((a.avg_nats - b.avg_nats).abs() < 1e-12);
            assert!((a.truncation_gap - b.truncation_gap).abs() < 1e-12);
        }
    }

    #[test]
    fn brq_sf_respects_beta() {
        let p = reference(16);
        let cfg = SchemeConfig {
            horizon: 12,
            ..SchemeConfig::default()
        };
        let (pt, worst) = brq_sf_detail(&p, 10.0, &cfg).unwrap();
        assert!(worst <= cfg.beta);
        assert!(pt.eps_certified <= cfg.epsilon + pt.truncation_gap + 1e-15);
    }

    #[test]
    fn points_are_deterministic_and_consistent() {
        let p = reference(16);
        let cfg = SchemeConfig {
            horizon: 12,
            ..SchemeConfig::default()
        };
        let c = crate::channel::capacity(&p);
        for s in [Scheme::Vld, Scheme::Vlsf, Scheme::BrqCsit, Scheme::BrqSf] {
            for ln_m1 in [4.0, 15.0] {
                let a = evaluate(s, &p, ln_m1, &cfg).unwrap();
                let b = evaluate(s, &p, ln_m1, &cfg).unwrap();
                assert_eq!(a, b);
                assert!(a.avg_blocks >= 1.0);
                assert!(a.rate_bits <= c + 1e-9, "{s:?} {}", a.rate_bits);
                assert!(a.eps_certified <= cfg.epsilon + a.truncation_gap + 1e-15);
                let r = a.avg_nats / (LN_2 * a.avg_blocklength);
                assert_eq!(r, a.rate_bits);
            }
        }
    }

    #[test]
    fn m1_decimal_formatting() {
        let p = reference(100);
        let pt = scheme_fixed(&p, 1, 0.5).unwrap();
        let (m, e) = pt.m1_decimal();
        assert!((1.0..10.0).contains(&m));
        assert!(((m.log10() + e as f64) - pt.ln_m1 / std::f64::consts::LN_10).abs() < 1e-12);
    }
}
