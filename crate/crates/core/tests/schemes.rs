use geosde::geometry::constraint_residual;
use geosde::manifolds::{random_point, Ellipsoid};
use geosde::noise::generate_grid;
use geosde::schemes::{exp_em_step, simulate_path};
use geosde::sde::ProjectedDiffusion;
use geosde::{EmbeddedManifold, SchemeId, Sphere, SphereBrownianMotion, Vector};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_em_step_stays_on_sphere(n in 1usize..40, seed in any::<u64>(), k in 3i32..12, scale in 0.1f64..10.0) {
        let s = Sphere::new(n).unwrap();
        let bm = SphereBrownianMotion::new(n).unwrap();
        let delta = 2f64.powi(-k);
        let x = random_point(&s, seed);
        let grid = generate_grid(seed, 0, n + 1, delta, 1).unwrap();
        let z: Vec<f64> = grid.row(0).iter().map(|v| v * scale).collect();
        let y = exp_em_step(&s, &bm, &x, delta, &z).unwrap();
        prop_assert!(constraint_residual(&s, &y) <= 1e-12);
    }

    #[test]
    fn exp_em_step_stays_on_ellipsoid(coeffs in prop::collection::vec(0.3f64..3.0, 3..6), seed in any::<u64>()) {
        let ell = Ellipsoid::new(coeffs).unwrap();
        let dim = ell.ambient_dim();
        let sde = ProjectedDiffusion::brownian(ell.clone());
        let x = random_point(&ell, seed);
        let grid = generate_grid(seed, 1, dim, 0.01, 1).unwrap();
        let y = exp_em_step(&ell, &sde, &x, 0.01, grid.row(0)).unwrap();
        prop_assert!(constraint_residual(&ell, &y) <= 1e-10);
    }
}

#[test]
fn ellipsoid_path_stays_on_manifold() {
    let ell = Ellipsoid::new(vec![1.0, 2.0, 4.0]).unwrap();
    let sde = ProjectedDiffusion::brownian(ell.clone());
    let grid = generate_grid(3, 0, 3, 0.01, 200).unwrap();
    let path = simulate_path(&ell, &sde, SchemeId::ExpEm, &ell.base_point(), &grid, None).unwrap();
    assert!(path.max_deviation() <= 1e-10);
    let eu = simulate_path(&ell, &sde, SchemeId::EuEm, &ell.base_point(), &grid, None).unwrap();
    assert!(eu.max_deviation() > path.max_deviation());
}

#[test]
fn every_step_size_preserves_sphere() {
    let s = Sphere::new(20).unwrap();
    let bm = SphereBrownianMotion::new(20).unwrap();
    for k in 3..=10 {
        let grid = generate_grid(42, 0, 21, 2f64.powi(-k), 1000).unwrap();
        let p = simulate_path(&s, &bm, SchemeId::ExpEm, &s.base_point(), &grid, None).unwrap();
        assert!(p.deviations.iter().all(|d| *d <= 1e-12), "delta 2^-{k}");
        let last: &Vector = p.final_point();
        assert!((last.norm() - 1.0).abs() <= 1e-12);
    }
}
