//! Seeded generator for the reference 24-slot macro load area.
//!
//! Twenty consumers with smooth, mutually uncorrelated desired profiles up to
//! 200 kW each; a thermal plant (`0.02 c² + 11.5 c`, c in MW, 200 kW to 1 MW);
//! a photovoltaic plant peaking at 1 MW around midday; and a 2 MW grid
//! connection billed 9.87 €cent/kWh from 8:00 to 18:00 and 18.21 otherwise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::calibrate_umax;
use crate::model::{
    GeneratorSpec, GridSpec, LacSpec, PvSpec, Scenario, SolverOptions, TimeGrid, TppSpec,
};

pub const DEFAULT_SEED: u64 = 2024;
pub const LAC_COUNT: usize = 20;
pub const LAC_MAX_KW: f64 = 200.0;
pub const K_SENSITIVITY: f64 = 0.217;
pub const OFF_PEAK_TARIFF: f64 = 9.87;
pub const PEAK_TARIFF: f64 = 18.21;
pub const GRID_MAX_KW: f64 = 2000.0;
pub const TPP_ALPHA: f64 = 0.02;
pub const TPP_BETA: f64 = 11.5;
pub const TPP_MIN_KW: f64 = 200.0;
pub const TPP_MAX_KW: f64 = 1000.0;
pub const PV_PEAK_KW: f64 = 1000.0;

/// Bi-hourly tariff for the hour starting at `hour`.
pub fn grid_tariff(hour: f64) -> f64 {
    if (8.0..18.0).contains(&hour) {
        OFF_PEAK_TARIFF
    } else {
        PEAK_TARIFF
    }
}

/// Bell-shaped photovoltaic availability, zero before 6:00 and after 19:00.
pub fn pv_availability(hour_mid: f64) -> f64 {
    let (rise, set) = (6.0, 19.0);
    if hour_mid <= rise || hour_mid >= set {
        return 0.0;
    }
    let s = (PI * (hour_mid - rise) / (set - rise)).sin();
    PV_PEAK_KW * s * s
}

/// Smooth random daily profile in `[10, 160]` kW: a random base level plus two
/// harmonics with random phase.
fn desired_profile(rng: &mut ChaCha8Rng, slots: usize) -> Vec<f64> {
    let base: f64 = rng.random_range(36.0..84.0);
    let a1: f64 = rng.random_range(10.0..40.0);
    let a2: f64 = rng.random_range(0.0..15.0);
    let ph1: f64 = rng.random_range(0.0..2.0 * PI);
    let ph2: f64 = rng.random_range(0.0..2.0 * PI);
    (0..slots)
        .map(|t| {
            let x = 2.0 * PI * (t as f64 + 0.5) / slots as f64;
            let v = base + a1 * (x + ph1).sin() + a2 * (2.0 * x + ph2).sin();
            v.clamp(10.0, 160.0)
        })
        .collect()
}

/// The reference scenario with one-hour slots. Consumers' forecast price is
/// the grid tariff, so utilities are calibrated against it.
pub fn reference_scenario(seed: u64) -> Scenario<f64> {
    let slots = 24;
    let hours: Vec<f64> = (0..slots).map(|t| t as f64).collect();
    let tariff: Vec<f64> = hours.iter().map(|&h| grid_tariff(h)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lacs = (0..LAC_COUNT)
        .map(|r| {
            let desired = desired_profile(&mut rng, slots);
            let u_max = desired
                .iter()
                .zip(&tariff)
                .map(|(&x, &k)| calibrate_umax(k, K_SENSITIVITY, x))
                .collect();
            LacSpec {
                id: format!("lac{:02}", r + 1),
                desired_power: desired,
                min_power: vec![0.0; slots],
                max_power: vec![LAC_MAX_KW; slots],
                k_sensitivity: K_SENSITIVITY,
                forecast_price: tariff.clone(),
                u_max,
            }
        })
        .collect();
    let generators = vec![
        GeneratorSpec::Grid(GridSpec {
            id: "grid".into(),
            tariff: tariff.clone(),
            max_draw: vec![GRID_MAX_KW; slots],
        }),
        GeneratorSpec::Tpp(TppSpec {
            id: "tpp".into(),
            alpha: TPP_ALPHA,
            beta: TPP_BETA,
            gamma: 0.0,
            min_gen: vec![TPP_MIN_KW; slots],
            max_gen: vec![TPP_MAX_KW; slots],
        }),
        GeneratorSpec::Pv(PvSpec {
            id: "pv".into(),
            availability: hours.iter().map(|&h| pv_availability(h + 0.5)).collect(),
        }),
    ];
    Scenario {
        time_grid: TimeGrid {
            slot_count: slots,
            slot_duration_hours: 1.0,
        },
        lacs,
        generators,
        solver: SolverOptions::default(),
    }
}

/// Same consumers, supplied only by the grid at its tariff. The grid limit is
/// lifted to the total consumer capacity so the tariff always clears.
pub fn grid_only_variant(scenario: &Scenario<f64>) -> Scenario<f64> {
    let slots = scenario.slot_count();
    let tariff: Vec<f64> = match scenario.grids().next() {
        Some(g) => g.tariff.clone(),
        None => (0..slots)
            .map(|t| scenario.lacs[0].forecast_price[t])
            .collect(),
    };
    let capacity: Vec<f64> = (0..slots)
        .map(|t| {
            let demand: f64 = scenario.lacs.iter().map(|l| l.max_power[t]).sum();
            let existing = scenario.grids().next().map_or(0.0, |g| g.max_draw[t]);
            demand.max(existing)
        })
        .collect();
    let lacs = scenario
        .lacs
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.forecast_price = tariff.clone();
            l.u_max = (0..slots)
                .map(|t| calibrate_umax(tariff[t], l.k_sensitivity, l.desired_power[t]))
                .collect();
            l
        })
        .collect();
    Scenario {
        time_grid: scenario.time_grid.clone(),
        lacs,
        generators: vec![GeneratorSpec::Grid(GridSpec {
            id: "grid".into(),
            tariff,
            max_draw: capacity,
        })],
        solver: scenario.solver.clone(),
    }
}
