//! Acceptance criteria 1 to 8, one PASS/FAIL line each.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use brq_core::bounds::{dt_bound, ems_bound_prop1, ems_bound_thm1, Engine, MessageSchedule};
use brq_core::channel::{capacity, dispersion, normal_approx_rate, ChannelParams, Span, State, Unit};
use brq_core::cli;
use brq_core::dist::{block_info_pmf, convolve, exact_two_group_ccdf, BlockMeasure, GridPmf, Group, Measure, Rounding};
use brq_core::simulate::{
    codeword_index, codeword_tuple, gen_tree_codebook, shared_prefix_counts, simulate_ems, simulate_emssf,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use State::{Bad, Good};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

const GRID_STEP: f64 = 1e-5;

fn grid(rounding: Rounding) -> Engine {
    Engine::Grid {
        step: GRID_STEP,
        rounding,
    }
}

fn random_states(rng: &mut ChaCha8Rng, n: usize) -> Vec<State> {
    (0..n).map(|_| if rng.gen_bool(0.5) { Good } else { Bad }).collect()
}

fn random_params(rng: &mut ChaCha8Rng, t: u32) -> ChannelParams {
    loop {
        let a: f64 = rng.gen_range(0.01..=0.45);
        let b: f64 = rng.gen_range(0.01..=0.45);
        if (a - b).abs() > 1e-3 {
            return ChannelParams::new(a.max(b), a.min(b), 0.5, t).unwrap();
        }
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1001);
    let mut worst_grid_small = 0.0f64;
    let mut worst_exact = 0.0f64;
    let mut problems = Vec::new();
    for case in 0..50 {
        let t = [2, 4, 8, 16][rng.gen_range(0..4)];
        let p = random_params(&mut rng, t);
        let n = rng.gen_range(1..=3);
        let states = random_states(&mut rng, n);
        let sizes: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=8) as f64).collect();
        let s = MessageSchedule::from_sizes(&sizes).unwrap();
        let pes = grid(Rounding::Pessimistic);
        let opt = grid(Rounding::Optimistic);
        let thm1_hi = ems_bound_thm1(&p, &states, &s, pes).unwrap().epsilon_bound;
        let thm1_lo = ems_bound_thm1(&p, &states, &s, opt).unwrap().epsilon_bound;
        let prop1_hi = ems_bound_prop1(&p, &states, &s, pes).unwrap().epsilon_bound;
        let prop1_lo = ems_bound_prop1(&p, &states, &s, opt).unwrap().epsilon_bound;
        // both brackets contain the same exact value
        let tol = (thm1_hi - thm1_lo) + (prop1_hi - prop1_lo) + 1e-12;
        let d = (thm1_hi - prop1_hi).abs();
        if d > tol {
            problems.push(format!("case {case}: grid gap {d:e} > tolerance {tol:e}"));
        }
        if t <= 8 {
            worst_grid_small = worst_grid_small.max(d);
            if d > 1e-6 {
                problems.push(format!("case {case} (T={t}): grid gap {d:e} > 1e-6"));
            }
        }
        let a = ems_bound_thm1(&p, &states, &s, Engine::Exact).unwrap().epsilon_bound;
        let b = ems_bound_prop1(&p, &states, &s, Engine::Exact).unwrap().epsilon_bound;
        worst_exact = worst_exact.max((a - b).abs());
        if (a - b).abs() > 1e-9 {
            problems.push(format!("case {case}: exact gap {:e}", (a - b).abs()));
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(60) {
        problems.push(format!("took {took:?}"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "50 configs, worst grid gap (T<=8) {worst_grid_small:.2e}, worst exact gap {worst_exact:.2e}, {took:.1?} {}",
            problems.join("; ")
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let p = ChannelParams::new(0.30, 0.05, 0.6, 8).unwrap();
    let ems = simulate_ems(&p, &[Bad, Good, Bad], &[4, 3, 2], None, 100_000, 2024).unwrap();
    let ems_ok = ems.error_rate <= ems.bound_value + 3.0 * ems.std_err;
    let states: Vec<State> = (0..24).map(|k| if k % 2 == 0 { Bad } else { Good }).collect();
    let sf = simulate_emssf(&p, &states, &[4, 3], 1e-2, 100_000, 2025).unwrap();
    let sf_err_ok = sf.error_rate <= sf.bound_value + 3.0 * sf.std_err;
    let (avg, expect, se) = (
        sf.avg_stop_block.unwrap(),
        sf.expected_stop_bound.unwrap(),
        sf.stop_block_std_err.unwrap(),
    );
    let sf_stop_ok = avg <= expect + 3.0 * se;
    let took = start.elapsed();
    let ok = ems_ok && sf_err_ok && sf_stop_ok && ems.pass && sf.pass && took < Duration::from_secs(120);
    verdict(
        ok,
        format!(
            "EMS error {:.5} vs bound {:.5}; EMS-SF error {:.2e} vs bound {:.2e}, mean stop {:.4} vs E[tau] {:.4} (+3se {:.4}); {took:.1?}",
            ems.error_rate,
            ems.bound_value,
            sf.error_rate,
            sf.bound_value,
            avg,
            expect,
            expect + 3.0 * se
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3003);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &t in &[1u32, 2, 4, 8, 16] {
        for _ in 0..6 {
            let p = random_params(&mut rng, t);
            let blocks = rng.gen_range(1..=3);
            let states = random_states(&mut rng, blocks);
            let total_bits = (t * blocks as u32) as f64;
            let ln_m = rng.gen_range(0.1..=1.2) * total_bits * LN_2 * 0.6;
            let m_minus_1_half = ln_m.exp_m1() / 2.0;
            let gamma = m_minus_1_half.ln();
            let bad = states.iter().filter(|&&s| s == Bad).count() as u32;
            let groups = |measure| {
                [
                    Group::new(Bad, measure, bad),
                    Group::new(Good, measure, blocks as u32 - bad),
                ]
            };
            let missed = 1.0 - exact_two_group_ccdf(&p, groups(Measure::Conditioned), gamma).unwrap();
            let conf = m_minus_1_half * exact_two_group_ccdf(&p, groups(Measure::Unconditioned), gamma).unwrap();
            let b = dt_bound(&p, &states, ln_m, Engine::Exact).unwrap();
            let d = (b.epsilon_bound - (missed + conf)).abs();
            worst = worst.max(d);
            cases += 1;
        }
    }
    verdict(
        worst <= 1e-6,
        format!("{cases} configs, worst |dt - oracle| {worst:.2e}"),
    )
}

fn group_pmf(p: &ChannelParams, bad: u32, good: u32, measure: Measure, step: f64) -> GridPmf {
    let mut acc = GridPmf::point(0.0, step, 0.0).unwrap();
    for (s, n) in [(Bad, bad), (Good, good)] {
        let b = block_info_pmf(p, BlockMeasure::new(s, measure), step).unwrap();
        for _ in 0..n {
            acc = convolve(&acc, &b).unwrap();
        }
    }
    acc
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4004);
    let mut problems = Vec::new();
    let mut checks = 0;
    let mut worst_excess = 0.0f64;
    for case in 0..24 {
        let t = [2, 4, 8, 16][case % 4];
        let p = random_params(&mut rng, t);
        let bad = rng.gen_range(0..=2);
        let good = rng.gen_range(0..=2).max(u32::from(bad == 0));
        let step = [1e-2, 1e-3, 1e-5][case % 3];
        for measure in [Measure::Conditioned, Measure::Unconditioned] {
            let pmf = group_pmf(&p, bad, good, measure, step);
            let span = ((bad + good) * t) as f64 * LN_2;
            let groups = [Group::new(Bad, measure, bad), Group::new(Good, measure, good)];
            for _ in 0..8 {
                let th = rng.gen_range(-span..=span);
                let exact = exact_two_group_ccdf(&p, groups, th).unwrap();
                let hi = pmf.ccdf(th, Rounding::Pessimistic);
                let lo = pmf.ccdf(th, Rounding::Optimistic);
                let near = pmf.mass_between(th - pmf.slack(), th + pmf.slack()) + pmf.truncated_mass();
                checks += 1;
                if !(lo <= exact + 1e-13 && exact <= hi + 1e-13) {
                    problems.push(format!("case {case}: order {lo} {exact} {hi}"));
                }
                let excess = (hi - exact).max(exact - lo);
                worst_excess = worst_excess.max(excess - near);
                if excess > near + 1e-13 {
                    problems.push(format!(
                        "case {case}: error {excess:e} beyond near-threshold mass {near:e}"
                    ));
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "{checks} thresholds, worst error beyond near-threshold mass {worst_excess:.2e} {}",
            problems.join("; ")
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut problems = Vec::new();
    let bsc = |d: f64| d * (1.0 - d) * ((1.0 - d) / d).ln().powi(2);
    for t in [1u32, 10, 100] {
        for (d0, d1) in [(0.3, 0.05), (0.11, 0.02), (0.45, 0.2)] {
            for (q, d) in [(0.0, d0), (1.0, d1)] {
                let p = ChannelParams::new(d0, d1, q, t).unwrap();
                let v = dispersion(&p, Span::PerUse, Unit::Nats);
                if (v - bsc(d)).abs() > 1e-12 * bsc(d) {
                    problems.push(format!("q={q}: {v} vs {}", bsc(d)));
                }
            }
            let same = ChannelParams::new(d0, d0, 0.37, t).unwrap();
            let v = dispersion(&same, Span::PerUse, Unit::Nats);
            if (v - bsc(d0)).abs() > 1e-12 * bsc(d0) {
                problems.push(format!("delta0=delta1: {v} vs {}", bsc(d0)));
            }
            let p = ChannelParams::new(d0, d1, 0.6, t).unwrap();
            for n in [1.0, 137.0, 1e4] {
                let r = normal_approx_rate(&p, n, 0.5).unwrap();
                if (r - capacity(&p)).abs() > 1e-12 {
                    problems.push(format!("n={n}: {r} vs C {}", capacity(&p)));
                }
            }
        }
    }
    let detail = if problems.is_empty() {
        "q in {0,1} and delta0=delta1 give the BSC dispersion, rate at eps=0.5 is C (27 + 9 + 27 checks)".to_string()
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty(), detail)
}

/// Parsed `curves` rows: scheme, avg blocklength, rate.
fn parse_curves(csv: &str) -> Vec<(String, f64, f64)> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let len = f[4].parse().ok()?;
            let rate = f[6].parse().ok()?;
            Some((f[0].to_string(), len, rate))
        })
        .collect()
}

fn curve(rows: &[(String, f64, f64)], scheme: &str) -> Vec<(f64, f64)> {
    let mut c: Vec<(f64, f64)> = rows.iter().filter(|r| r.0 == scheme).map(|r| (r.1, r.2)).collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    c
}

/// Piecewise-linear value of a curve at `x`, if `x` lies within its range.
fn interp(c: &[(f64, f64)], x: f64) -> Option<f64> {
    let (first, last) = (c.first()?, c.last()?);
    if x < first.0 || x > last.0 {
        return None;
    }
    let i = c.partition_point(|p| p.0 < x);
    if c[i].0 == x {
        return Some(c[i].1);
    }
    let (a, b) = (c[i - 1], c[i]);
    Some(a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0))
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(std::iter::once("brq").chain(args.iter().copied()), &mut out, &mut err);
    assert!(err.is_empty(), "{}", String::from_utf8_lossy(&err));
    (code, String::from_utf8(out).unwrap())
}

fn criterion_6() -> Vec<(char, Verdict)> {
    let start = Instant::now();
    let (code, csv) = run_cli(&["curves"]);
    let took = start.elapsed();
    let p = cli::RunConfig::default().params;
    let eps = cli::RunConfig::default().scheme.epsilon;
    let t = p.t as f64;
    let c = capacity(&p);
    let rows = parse_curves(&csv);
    let mut out = Vec::new();

    let above: Vec<_> = rows.iter().filter(|r| r.2 >= c).collect();
    out.push((
        'a',
        verdict(
            code == 0 && above.is_empty() && took < Duration::from_secs(600),
            format!(
                "{} rows, capacity {c:.4}, {} at or above; sweep took {took:.1?}",
                rows.len(),
                above.len()
            ),
        ),
    ));

    let vld = curve(&rows, "vld");
    let drops = vld.windows(2).filter(|w| w[1].1 < w[0].1).count();
    out.push((
        'b',
        verdict(drops > 0, format!("{drops} decreases along the VLD curve")),
    ));

    let csit = curve(&rows, "brq_csit");
    let mut worst = f64::INFINITY;
    let mut best = f64::NEG_INFINITY;
    let mut notes = Vec::new();
    for w in vld.windows(3) {
        if w[1].1 < w[0].1 && w[1].1 <= w[2].1 {
            match interp(&csit, w[1].0) {
                Some(r) => {
                    let d = r - w[1].1;
                    worst = worst.min(d);
                    best = best.max(d);
                    notes.push(format!("L={:.0}: {d:+.4}", w[1].0));
                }
                None => notes.push(format!("L={:.0}: outside brq_csit range", w[1].0)),
            }
        }
    }
    out.push((
        'c',
        verdict(
            worst >= 0.0 && best >= 0.005,
            format!("brq_csit - vld at VLD minima: {}", notes.join(", ")),
        ),
    ));

    let vlsf = curve(&rows, "vlsf");
    let sf = curve(&rows, "brq_sf");
    let (mut wins, mut total) = (0, 0);
    for &(l, r) in &sf {
        if let Some(v) = interp(&vlsf, l) {
            total += 1;
            wins += usize::from(r >= v);
        }
    }
    let frac = wins as f64 / total.max(1) as f64;
    out.push((
        'd',
        verdict(
            total > 0 && frac >= 0.9,
            format!(
                "brq_sf >= vlsf at {wins} of {total} matched points ({:.0}%)",
                100.0 * frac
            ),
        ),
    ));

    let mut losses = Vec::new();
    let mut checked = 0;
    for s in ["vld", "vlsf", "brq_csit", "brq_sf"] {
        for (l, r) in curve(&rows, s) {
            if l >= 3.0 * t {
                checked += 1;
                let na = normal_approx_rate(&p, l, eps).unwrap();
                if r <= na {
                    losses.push(format!("{s} L={l:.0}: {r:.4} <= {na:.4}"));
                }
            }
        }
    }
    out.push((
        'e',
        verdict(
            losses.is_empty() && checked > 0,
            format!(
                "{checked} points with L >= 3T, {} at or below normal approximation {}",
                losses.len(),
                losses.join("; ")
            ),
        ),
    ));
    out
}

fn criterion_7() -> Verdict {
    let args = ["curves", "--points", "8"];
    let with = |threads: &str| {
        let mut a = args.to_vec();
        a.extend(["--threads", threads]);
        run_cli(&a)
    };
    let (c1, a) = with("4");
    let (c2, b) = with("4");
    let (c3, s) = with("1");
    let ok = c1 == 0 && c2 == 0 && c3 == 0 && a == b && a == s && a.lines().count() == 1 + 20 + 4 * 8 + 1;
    verdict(
        ok,
        format!(
            "{} bytes, parallel twice and serial once, identical: {}",
            a.len(),
            a == b && a == s
        ),
    )
}

fn all_size_tuples() -> Vec<Vec<u32>> {
    let mut v = Vec::new();
    for a in 1..=64u32 {
        v.push(vec![a]);
        for b in 1..=64 / a {
            v.push(vec![a, b]);
            for c in 1..=64 / (a * b) {
                v.push(vec![a, b, c]);
            }
        }
    }
    v
}

fn criterion_8() -> Verdict {
    let mut problems = Vec::new();
    let tuples = all_size_tuples();
    for m in &tuples {
        let total: u64 = m.iter().map(|&x| x as u64).product();
        let n = m.len();
        let cb = gen_tree_codebook(total ^ 0x8008, 4, m).unwrap();
        let mut seen = vec![false; total as usize];
        let mut prefix_sums = vec![0u64; n];
        let words: Vec<Vec<u32>> = (1..=total).map(|j| cb.codeword(j)).collect();
        let tuples_j: Vec<Vec<u32>> = (1..=total).map(|j| codeword_tuple(j, m).unwrap()).collect();
        for j in 1..=total {
            let tup = &tuples_j[j as usize - 1];
            let idx = codeword_index(tup, m).unwrap();
            if idx != j || seen[j as usize - 1] {
                problems.push(format!("{m:?}: index of {tup:?} is {idx}, expected {j}"));
            }
            seen[j as usize - 1] = true;
            let counts = shared_prefix_counts(j, m).unwrap();
            let mut brute = vec![0u64; n];
            for i in 1..j {
                let other = &tuples_j[i as usize - 1];
                let common = tup.iter().zip(other).take_while(|(a, b)| a == b).count();
                if common < n {
                    brute[common] += 1;
                }
                let (wi, wj) = (&words[i as usize - 1], &words[j as usize - 1]);
                for b in 0..common {
                    if wi[b] != wj[b] {
                        problems.push(format!("{m:?}: codewords {i} and {j} differ in shared block {b}"));
                    }
                }
            }
            if counts != brute {
                problems.push(format!("{m:?} j={j}: {counts:?} vs brute force {brute:?}"));
            }
            let mut p = 1u64;
            for (k, s) in prefix_sums.iter_mut().enumerate() {
                *s += (j - 1) / p;
                p *= m[k] as u64;
            }
        }
        // 2 sum_j floor((j-1)/P_n) = M (M/P_n - 1)
        let mut p = 1u64;
        for (k, &s) in prefix_sums.iter().enumerate() {
            if 2 * s != total * (total / p - 1) {
                problems.push(format!("{m:?} n={k}: averaging identity fails"));
            }
            p *= m[k] as u64;
        }
        if problems.len() > 10 {
            break;
        }
    }
    verdict(
        problems.is_empty(),
        format!("{} schedules {}", tuples.len(), problems.join("; ")),
    )
}

fn report(label: &str, v: &Verdict) -> bool {
    println!(
        "criterion {label}: {} | {}",
        if v.ok { "PASS" } else { "FAIL" },
        v.detail.trim()
    );
    v.ok
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report("1", &criterion_1());
    ok &= report("2", &criterion_2());
    ok &= report("3", &criterion_3());
    ok &= report("4", &criterion_4());
    ok &= report("5", &criterion_5());
    let six = criterion_6();
    let all6 = six.iter().all(|(_, v)| v.ok);
    for (part, v) in &six {
        report(&format!("6{part}"), v);
    }
    report("6", &verdict(all6, "all parts"));
    ok &= all6;
    ok &= report("7", &criterion_7());
    ok &= report("8", &criterion_8());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
