use brq_core::bounds::{ems_bound_prop1, ems_bound_thm1, flat_gammas_ln, next_ln_weight, Engine, MessageSchedule};
use brq_core::channel::{capacity, ChannelParams, State};
use brq_core::dist::Rounding;
use brq_core::schemes::{evaluate, Scheme, SchemeConfig};
use brq_core::simulate::{codeword_index, codeword_tuple};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = ChannelParams> {
    (0.05f64..0.45, 0.0f64..0.9, 0.1f64..0.9, 1u32..=6)
        .prop_map(|(d0, frac, q, t)| ChannelParams::new(d0, d0 * frac, q, t).unwrap())
}

fn blocks(max: usize) -> impl Strategy<Value = Vec<(State, f64)>> {
    prop::collection::vec((any::<bool>(), 1u32..=6), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(g, m)| (if g { State::Good } else { State::Bad }, m as f64))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn both_bounds_agree_and_grid_brackets_exact(p in params(), b in blocks(3)) {
        let states: Vec<State> = b.iter().map(|x| x.0).collect();
        let sizes: Vec<f64> = b.iter().map(|x| x.1).collect();
        let s = MessageSchedule::from_sizes(&sizes).unwrap();
        let a = ems_bound_thm1(&p, &states, &s, Engine::Exact).unwrap().epsilon_bound;
        let c = ems_bound_prop1(&p, &states, &s, Engine::Exact).unwrap().epsilon_bound;
        prop_assert!((a - c).abs() <= 1e-9 * a.max(1.0), "{a} vs {c}");
        prop_assert!(a >= 0.0);
        for (rounding, sign) in [(Rounding::Pessimistic, 1.0), (Rounding::Optimistic, -1.0)] {
            let g = ems_bound_thm1(&p, &states, &s, Engine::Grid { step: 1e-3, rounding }).unwrap().epsilon_bound;
            prop_assert!(sign * (g - a) >= -1e-12, "{rounding:?}: {g} vs {a}");
        }
    }

    #[test]
    fn flat_gammas_hold_the_weight(ln_m in prop::collection::vec(0.0f64..6.0, 1..6), eps in 1e-6f64..0.5) {
        let g = flat_gammas_ln(&ln_m, 8, eps);
        prop_assert_eq!(g.len(), 8);
        let mut ln_w = f64::NEG_INFINITY;
        for (k, &gk) in g.iter().enumerate() {
            prop_assert!(gk >= 0.0);
            ln_w = next_ln_weight(ln_w, ln_m.get(k).copied().unwrap_or(0.0), gk);
            prop_assert!(ln_w <= eps.ln() + 1e-9);
        }
    }

    #[test]
    fn codeword_index_round_trips(m in prop::collection::vec(1u32..=9, 1..=4), seed in any::<u64>()) {
        let total: u64 = m.iter().map(|&x| x as u64).product();
        let j = seed % total + 1;
        let t = codeword_tuple(j, &m).unwrap();
        prop_assert_eq!(codeword_index(&t, &m).unwrap(), j);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scheme_points_respect_capacity_and_target(p in params(), bits in 0.5f64..3.0, scheme in 1usize..5) {
        let cfg = SchemeConfig { horizon: 8, ..SchemeConfig::default() };
        let ln_m1 = bits * p.t as f64 * std::f64::consts::LN_2;
        if let Ok(pt) = evaluate(Scheme::ALL[scheme], &p, ln_m1, &cfg) {
            prop_assert!(pt.rate_bits.is_sign_positive());
            prop_assert!(pt.rate_bits <= capacity(&p) + 1e-12);
            prop_assert!(pt.eps_certified <= 1.0 && pt.truncation_gap <= 1.0);
            prop_assert!(pt.avg_blocks >= 1.0 && pt.avg_blocks <= cfg.horizon as f64 + 1.0);
            prop_assert!(pt.eps_certified <= cfg.epsilon + pt.truncation_gap + 1e-12);
        }
    }
}
