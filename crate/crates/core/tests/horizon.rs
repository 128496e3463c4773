use mla_market::admm::{solve_horizon, solve_slot};
use mla_market::model::load_scenario;
use mla_market::synthetic::{reference_scenario, DEFAULT_SEED};
use mla_market::{GeneratorSpec, Scenario, SolverOptions};
use proptest::prelude::*;

fn permute(s: &Scenario, order: &[usize]) -> Scenario {
    let pick = |v: &Vec<f64>| order.iter().map(|&t| v[t]).collect::<Vec<_>>();
    let mut p = s.clone();
    for l in &mut p.lacs {
        l.desired_power = pick(&l.desired_power);
        l.min_power = pick(&l.min_power);
        l.max_power = pick(&l.max_power);
        l.forecast_price = pick(&l.forecast_price);
        l.u_max = pick(&l.u_max);
    }
    for g in &mut p.generators {
        match g {
            GeneratorSpec::Tpp(g) => {
                g.min_gen = pick(&g.min_gen);
                g.max_gen = pick(&g.max_gen);
            }
            GeneratorSpec::Pv(g) => g.availability = pick(&g.availability),
            GeneratorSpec::Grid(g) => {
                g.tariff = pick(&g.tariff);
                g.max_draw = pick(&g.max_draw);
            }
        }
    }
    p
}

#[test]
fn permuting_slots_permutes_results() {
    let s = reference_scenario(DEFAULT_SEED);
    let opts = SolverOptions::default();
    let base = solve_horizon(&s, &opts).unwrap();
    let order: Vec<usize> = (0..24).map(|t| (t * 7 + 5) % 24).collect();
    let permuted = solve_horizon(&permute(&s, &order), &opts).unwrap();
    for (k, &t) in order.iter().enumerate() {
        let (a, b) = (&base.slots[t], &permuted.slots[k]);
        assert_eq!(a.clearing_price, b.clearing_price);
        assert_eq!(a.allocation, b.allocation);
        assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let s = reference_scenario(11);
    let opts = SolverOptions::default();
    assert_eq!(
        solve_horizon(&s, &opts).unwrap(),
        solve_horizon(&s, &opts).unwrap()
    );
}

#[test]
fn one_slot_horizon_equals_solve_slot() {
    let s = permute(&reference_scenario(DEFAULT_SEED), &[13]);
    let mut one = s.clone();
    one.time_grid.slot_count = 1;
    let opts = SolverOptions::default();
    let h = solve_horizon(&one, &opts).unwrap();
    assert_eq!(h.slots.len(), 1);
    assert_eq!(h.slots[0], solve_slot(&one, 0, &opts).unwrap());
}

#[test]
fn lac_consumption_view_matches_allocation() {
    let s = reference_scenario(DEFAULT_SEED);
    let h = solve_horizon(&s, &SolverOptions::default()).unwrap();
    for (t, slot) in h.slots.iter().enumerate() {
        for r in 0..s.lacs.len() {
            assert_eq!(h.lac_consumption[r][t], -slot.allocation[r]);
        }
        for g in 0..s.generators.len() {
            assert_eq!(
                h.generator_injection[g][t],
                slot.allocation[s.lacs.len() + g]
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenario_toml_round_trip(seed in any::<u64>()) {
        let s = reference_scenario(seed);
        let text = s.to_toml_string().unwrap();
        let back: Scenario = load_scenario(&text).unwrap();
        prop_assert_eq!(back, s);
    }
}
