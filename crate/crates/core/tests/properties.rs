use ism_core::asa::{generate_candidate, AnnealSchedule, AnnealState, Bounds, Evaluated};
use ism_core::pathint::{build_kernel, evolve, Axis, Bandwidth, Grid, GridDistribution, OrnsteinUhlenbeck};
use ism_core::population::overlap;
use ism_core::risk::{from_gaussian, marginal_cdf, portfolio_return, to_gaussian, MarginalModel, PortfolioSpec};
use ism_core::rng::seeded;
use proptest::prelude::*;

fn marginal() -> impl Strategy<Value = MarginalModel> {
    (-1.0..1.0f64, 0.05..5.0f64).prop_map(|(m, chi)| MarginalModel::new(m, chi).unwrap())
}

proptest! {
    #[test]
    fn marginal_round_trip(model in marginal(), z in -20.0..20.0f64) {
        let dx = model.m + z * model.chi;
        let back = from_gaussian(&model, to_gaussian(&model, dx));
        prop_assert!((back - dx).abs() <= 1e-9 * (1.0 + dx.abs()), "dx {dx} back {back}");
    }

    #[test]
    fn marginal_cdf_is_monotone(model in marginal(), a in -10.0..10.0f64, b in -10.0..10.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (fa, fb) = (marginal_cdf(&model, lo), marginal_cdf(&model, hi));
        prop_assert!((0.0..=1.0).contains(&fa) && (0.0..=1.0).contains(&fb));
        prop_assert!(fa <= fb);
    }

    #[test]
    fn direct_return_is_linear_in_exposures(
        a in prop::collection::vec(-3.0..3.0f64, 3),
        dx in prop::collection::vec(-1.0..1.0f64, 3),
        c in 0.1..10.0f64,
    ) {
        let base = PortfolioSpec::Direct { a: a.clone(), b: vec![0.0; 3] };
        let scaled = PortfolioSpec::Direct { a: a.iter().map(|v| v * c).collect(), b: vec![0.0; 3] };
        let r0 = portfolio_return(&base, &dx).unwrap();
        let r1 = portfolio_return(&scaled, &dx).unwrap();
        prop_assert!((r1 - c * r0).abs() <= 1e-12 * (1.0 + r1.abs()));
    }

    #[test]
    fn overlap_is_a_coefficient(
        wa in prop::collection::vec(0.0..1.0f64, 25),
        wb in prop::collection::vec(0.0..1.0f64, 25),
    ) {
        prop_assume!(wa.iter().sum::<f64>() > 1e-3 && wb.iter().sum::<f64>() > 1e-3);
        let grid = Grid::new(vec![Axis::new("x", 0.0, 4.0, 5), Axis::new("y", 0.0, 4.0, 5)]).unwrap();
        let a = GridDistribution::new(grid.clone(), wa).unwrap();
        let b = GridDistribution::new(grid, wb).unwrap();
        let ab = overlap(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((overlap(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ab - overlap(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn kernel_rows_are_stochastic(tau in 0.2..5.0f64, d in 0.1..4.0f64, dt in 0.001..0.1f64) {
        let grid = Grid::new(vec![Axis::new("x", -6.0, 6.0, 61)]).unwrap();
        let ou = OrnsteinUhlenbeck { tau, diffusion: d, center: 0.0 };
        let k = build_kernel(&ou, &grid, dt, &Bandwidth::Sigmas(6.0)).unwrap();
        for i in 0..grid.cells() {
            let row = k.row(i);
            prop_assert!(row.iter().all(|&(_, w)| w >= 0.0));
            prop_assert!((row.iter().map(|&(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let start = GridDistribution::gaussian(grid, &[1.0], &[0.5]).unwrap();
        let out = evolve(&start, &k, 20).unwrap();
        prop_assert!((out.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn candidates_stay_in_bounds(
        lo in -10.0..0.0f64,
        width in 1e-3..20.0f64,
        frac in 0.0..=1.0f64,
        k in 0.0..1e4f64,
        seed in any::<u64>(),
    ) {
        let hi = lo + width;
        let bounds = Bounds::new(vec![(lo, hi), (0.0, 1.0)]).unwrap();
        let schedule = AnnealSchedule::uniform(2, 1.0, 1.0, 100);
        let mut state = AnnealState::new(Evaluated { x: vec![lo + frac * width, 0.5], cost: 0.0 }, 1.0);
        state.k = vec![k, k];
        let mut rng = seeded(seed);
        for _ in 0..20 {
            let c = generate_candidate(&state, &schedule, &bounds, &mut rng).unwrap();
            prop_assert!(bounds.contains(&c), "{c:?} outside [{lo}, {hi}]");
        }
    }
}
