use std::collections::BTreeMap;

use ism_core::population::{
    propagation_experiment, Column, Connection, DriveWindow, ExogenousDrive, IdeaPattern, PopulationGraph,
    PropagationOptions, Region,
};
use ism_core::smni::{center_background, threshold_factor, ColumnParams, FiringState, LongRangedParams};

fn stm() -> ColumnParams {
    ColumnParams {
        n_e: 80.0,
        n_i: 30.0,
        tau: 1.0,
        threshold: [10.0, 10.0],
        efficacy: [[1.75, 1.85], [1.35, 0.85]],
        background: [[0.25, 0.15], [0.15, 0.25]],
        pol_mean: [[0.1, -0.1], [0.1, -0.1]],
        pol_spread: [[0.03f64.sqrt(); 2]; 2],
        nn_coeff: [0.0; 2],
        long: None,
    }
}

fn two_regions(weight: f64) -> (PopulationGraph, IdeaPattern) {
    let long = LongRangedParams { n_dagger: 10.0, efficacy: 2.0, background: 0.1, pol_mean: 0.2, m_dagger: 0.0 };
    let p = center_background(&ColumnParams { long: Some(long), ..stm() }, FiringState::ORIGIN).unwrap();
    let col = Column { params: p, state: FiringState::ORIGIN };
    let graph = PopulationGraph {
        regions: vec![
            Region { id: "a".into(), columns: vec![col.clone(); 2], lattice: None },
            Region { id: "b".into(), columns: vec![col; 2], lattice: None },
        ],
        connections: vec![Connection { src: "a".into(), dst: "b".into(), weight, delay: 1, allow_self: false }],
        drives: vec![ExogenousDrive {
            region: "a".into(),
            schedule: vec![DriveWindow { start: 0, end: 100, value: 10.0 }],
        }],
    };
    let mut targets = BTreeMap::new();
    targets.insert("b".to_string(), vec![FiringState::new(20.0, 6.0); 2]);
    (graph, IdeaPattern { targets, tolerance: 5.0 })
}

#[test]
fn centering_zeroes_threshold_factor() {
    for target in [FiringState::ORIGIN, FiringState::new(10.0, -5.0), FiringState::new(-30.0, 8.0)] {
        let c = center_background(&stm(), target).unwrap();
        let f = threshold_factor(target, &c).unwrap();
        assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12, "{target:?}: {f:?}");
    }
}

#[test]
fn propagation_is_seed_deterministic() {
    let (graph, pattern) = two_regions(0.3);
    let opts = PropagationOptions::new(15, 32);
    let a = propagation_experiment(&graph, &pattern, &opts, 11).unwrap();
    let b = propagation_experiment(&graph, &pattern, &opts, 11).unwrap();
    let c = propagation_experiment(&graph, &pattern, &opts, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn overlap_series_covers_pattern_regions_only() {
    let (graph, pattern) = two_regions(0.3);
    let r = propagation_experiment(&graph, &pattern, &PropagationOptions::new(5, 8), 3).unwrap();
    assert_eq!(r.epochs.len(), 6);
    assert!(r.overlap_series("a").is_none());
    let ov = r.overlap_series("b").unwrap();
    assert!(ov.iter().all(|v| (0.0..=1.0).contains(v)));
}
