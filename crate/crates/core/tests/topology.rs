mod common;

use common::oracles::{brute_grow, brute_prune, cardinality_run, oracle_target};
use east_core::tensor::Tensor;
use east_core::topology::{
    cyclic_target, erk_plan, erk_plan_for_budget, gradient_grow, magnitude_prune, CyclePhase, MaskedParam, Position,
    Regrowth, ScheduleMode, SelectionScope, TopologyConfig,
};
use proptest::prelude::*;

/// Values drawn from a small grid so that ties are common.
fn tied_tensor() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<bool>)> {
    (1usize..30, 1usize..30).prop_flat_map(|(a, b)| {
        let n = a * b;
        (
            Just(vec![a, b]),
            proptest::collection::vec((-4i32..=4).prop_map(|v| v as f64 * 0.25), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

fn layers(specs: &[(Vec<usize>, Vec<f64>, Vec<bool>)]) -> Vec<MaskedParam<f64>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, (s, w, m))| MaskedParam::with_mask(format!("l{i}"), Tensor::new(s, w.clone()).unwrap(), m.clone()).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prune_matches_stable_sort(specs in proptest::collection::vec(tied_tensor(), 1..4), frac in 0.0f64..1.0) {
        let mut params = layers(&specs);
        let active: usize = params.iter().map(|p| p.active_count()).sum();
        let k = (frac * active as f64) as usize;
        let expect = brute_prune(&params, k);
        let mut got = magnitude_prune(&mut params, k).unwrap();
        got.sort();
        prop_assert_eq!(got, expect);
        prop_assert_eq!(params.iter().map(|p| p.recount()).sum::<usize>(), active - k);
    }

    #[test]
    fn grow_matches_stable_sort(
        specs in proptest::collection::vec(tied_tensor(), 1..4),
        frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut params = layers(&specs);
        let grads: Vec<Vec<f64>> = params
            .iter()
            .enumerate()
            .map(|(l, p)| (0..p.dense_count()).map(|i| (((i * 7 + l * 3) as u64 ^ seed) % 5) as f64 - 2.0).collect())
            .collect();
        let inactive: Vec<Position> = params
            .iter()
            .enumerate()
            .flat_map(|(layer, p)| p.mask().iter().enumerate().filter(|(_, &m)| !m).map(move |(index, _)| Position { layer, index }).collect::<Vec<_>>())
            .collect();
        let exclude: Vec<Position> = inactive.iter().copied().step_by(3).collect();
        let k = (frac * (inactive.len() - exclude.len()) as f64) as usize;
        let expect = brute_grow(&params, &grads, k, &exclude);
        let g: Vec<Option<Vec<f64>>> = grads.iter().cloned().map(Some).collect();
        let mut got = gradient_grow(&mut params, &g, k, &exclude).unwrap();
        got.sort();
        prop_assert_eq!(&got, &expect);
        for p in &got {
            prop_assert!(params[p.layer].mask()[p.index]);
            prop_assert_eq!(params[p.layer].weights().data()[p.index], 0.0);
        }
    }

    #[test]
    fn erk_counts_hit_the_budget(
        shapes in proptest::collection::vec(
            prop_oneof![
                (1usize..64, 1usize..64).prop_map(|(a, b)| vec![a, b]),
                (1usize..16, 1usize..16).prop_map(|(a, b)| vec![a, b, 3, 3]),
            ],
            1..8,
        ),
        density in 0.001f64..1.0,
    ) {
        let plan = erk_plan(&shapes, density).unwrap();
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        prop_assert_eq!(plan.total_active(), (density * total as f64).round() as usize);
        for ((c, s), d) in plan.counts.iter().zip(&shapes).zip(&plan.densities) {
            prop_assert!(*c <= s.iter().product::<usize>());
            prop_assert!((0.0..=1.0).contains(d));
        }
    }

    #[test]
    fn cyclic_target_stays_in_range(t in 0u64..10_000, s_max in 0.5f64..0.999, gap in 0.01f64..0.4, cycles in 1u32..4) {
        let cfg = TopologyConfig {
            s_max,
            s_min: (s_max - gap).max(0.01),
            cyclic_end: 5000,
            cycles,
            interval_cyclic: 10,
            interval_fixed: 100,
            prune_rate: 0.3,
            regrowth: Regrowth::Gradient,
            schedule: ScheduleMode::Cyclic,
            phase: CyclePhase::HighStart,
            scope: SelectionScope::Global,
            seed: 0,
        };
        let s = cyclic_target(t, &cfg);
        prop_assert!(s >= cfg.s_min - 1e-12 && s <= cfg.s_max + 1e-12);
        if t != cfg.cyclic_end {
            prop_assert!((s - oracle_target(t, &cfg)).abs() < 1e-12);
        }
    }
}

#[test]
fn active_count_tracks_the_target_across_phases() {
    for seed in 0..6 {
        cardinality_run(seed, 200).unwrap();
    }
}

#[test]
fn budget_plan_uses_the_theoretical_denominator() {
    // 1000 stored weights, budget set from a 1500-weight theoretical count.
    let shapes = vec![vec![10, 50], vec![25, 20]];
    let plan = erk_plan_for_budget(&shapes, 0.1 * 1500.0).unwrap();
    assert_eq!(plan.total_active(), 150);
}
