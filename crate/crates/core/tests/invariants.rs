use proptest::prelude::*;
use rbridge::expr::{CoefficientExpr, Scope};
use rbridge::grid::Grid;
use rbridge::kernel::{compose, Marginal};
use rbridge::model::{ModelSpec, RegimeSet};
use rbridge::simulate::{
    girsanov_weight, kl_integrand, log_girsanov_weight, simulate_reference, ExprControls, IdentityControls, RngStream, Start,
};
use rbridge::sinkhorn::{iterate_c, EndpointKernel, SinkhornOptions};
use rbridge::usbp::{usbp_kernels, KillingModel};
use rbridge::verify::adjoint_pair;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 32, ..ProptestConfig::default() }
}

fn switching(b: f64, sigma: f64, q01: f64, q10: f64) -> ModelSpec {
    ModelSpec::builder(1, RegimeSet::numbered(2), 1.0)
        .drift(0, &[&b.to_string()])
        .drift(1, &[&(-b).to_string()])
        .diffusion(0, &[&sigma.to_string()])
        .diffusion(1, &["1"])
        .rate(0, 1, &q01.to_string())
        .rate(1, 0, &q10.to_string())
        .build()
        .unwrap()
}

fn killed(b: f64, sigma: f64, v: f64) -> KillingModel {
    let base = ModelSpec::builder(1, RegimeSet::numbered(1), 1.0)
        .drift(0, &[&b.to_string()])
        .diffusion(0, &[&sigma.to_string()])
        .build()
        .unwrap();
    KillingModel::new(base, CoefficientExpr::parse(&format!("{v}*(1 + t)"), &Scope::time_only()).unwrap(), vec![0.0]).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn sinkhorn_coupling_has_both_marginals(
        n in 2usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let k: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<f64>>() };
        let mu = norm((0..n).map(|_| rng.gen_range(0.05..1.0)).collect());
        let nu = norm((0..n).map(|_| rng.gen_range(0.05..1.0)).collect());
        let ek = EndpointKernel::from_dense(&k, n, 0.5, &mu, &nu).unwrap();
        let (bp, report) = iterate_c(&ek, None, SinkhornOptions { tol: 1e-13, max_iters: 100_000 }).unwrap();
        let (m0, mt) = bp.reconstructed(&ek);
        for r in 0..n {
            prop_assert!((m0[r] - mu[r]).abs() < 1e-10);
            prop_assert!((mt[r] - nu[r]).abs() < 1e-10);
        }
        prop_assert!(bp.phi0.iter().chain(&bp.phi_t).all(|v| *v > 0.0));
        prop_assert!(report.residuals.last().unwrap() <= &1e-13);
    }

    #[test]
    fn lattice_kernels_compose_exactly(
        b in -0.5f64..0.5,
        sigma in 0.8f64..1.5,
        v in 0.0f64..2.0,
        t in 0.0f64..0.3,
        gap1 in 0.05f64..0.3,
        gap2 in 0.05f64..0.3,
    ) {
        let km = killed(b, sigma, v);
        let grid = Grid::parse("-4:4:64").unwrap();
        let (u, s) = (t + gap1, t + gap1 + gap2);
        let (a, _) = usbp_kernels(&km, &grid, t, u).unwrap();
        let (c, _) = usbp_kernels(&km, &grid, u, s).unwrap();
        let (direct, _) = usbp_kernels(&km, &grid, t, s).unwrap();
        prop_assert!(compose(&a, &c).unwrap().max_abs_diff(&direct).unwrap() < 1e-10);
    }

    #[test]
    fn surviving_and_killed_mass_never_exceed_one(
        b in -0.5f64..0.5,
        sigma in 0.8f64..1.5,
        v in 0.0f64..2.0,
    ) {
        let km = killed(b, sigma, v);
        let grid = Grid::parse("-6:6:96").unwrap();
        let (p11, p12) = usbp_kernels(&km, &grid, 0.0, 1.0).unwrap();
        for r in 0..grid.len() {
            let total = p11.row_mass(r) + p12.row_mass(r);
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert!(p11.row(r).iter().chain(p12.row(r)).all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn identity_controls_give_unit_weight(seed in any::<u64>(), q01 in 0.1f64..2.0, q10 in 0.1f64..2.0) {
        let m = switching(0.3, 0.8, q01, q10);
        let p = simulate_reference(&m, &Start::new(0.0, vec![0.0], 0), 0.05, &RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(girsanov_weight(&p, &IdentityControls, &m).unwrap(), 1.0);
    }

    #[test]
    fn constant_drift_weight_matches_closed_form(seed in any::<u64>(), u in -1.0f64..1.0) {
        let m = ModelSpec::builder(1, RegimeSet::numbered(1), 1.0).diffusion(0, &["1"]).build().unwrap();
        let ctl = ExprControls::identity(&m).with_u(&m, 0, &[&u.to_string()]).unwrap();
        let p = simulate_reference(&m, &Start::new(0.0, vec![0.0], 0), 0.1, &RngStream::new(seed, 3)).unwrap();
        let w_t: f64 = p.noise.brownian.iter().sum();
        let expected = -u * w_t - 0.5 * u * u;
        prop_assert!((log_girsanov_weight(&p, &ctl, &m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_integrand_is_nonnegative(u in -2.0f64..2.0, xi in 0.05f64..5.0, x in -3.0f64..3.0) {
        let m = switching(0.1, 1.0, 0.6, 0.9);
        let ctl = ExprControls::identity(&m)
            .with_u(&m, 0, &[&u.to_string()]).unwrap()
            .with_xi(&m, 0, 1, &xi.to_string()).unwrap();
        let mut buf = [0.0];
        let f = kl_integrand(&ctl, &m, 0.5, &[x], 0, &mut buf).unwrap();
        prop_assert!(f >= 0.0);
        let zero = kl_integrand(&IdentityControls, &m, 0.5, &[x], 0, &mut buf).unwrap();
        prop_assert_eq!(zero, 0.0);
    }

    #[test]
    fn generator_and_adjoint_are_transposes(
        b in -1.0f64..1.0,
        sigma in 0.3f64..1.5,
        q01 in 0.0f64..2.0,
        q10 in 0.0f64..2.0,
        cf in -1.0f64..1.0,
        cg in -1.0f64..1.0,
    ) {
        let m = switching(b, sigma, q01, q10);
        let grid = Grid::parse("-5:5:80").unwrap();
        let bump = |c: f64, i: usize| -> Vec<f64> {
            grid.nodes().iter().map(|x| {
                let r = (x[0] - c - 0.3 * i as f64) / 1.5;
                if r.abs() < 1.0 { (1.0 - r * r).powi(4) } else { 0.0 }
            }).collect()
        };
        let f: Vec<f64> = [bump(cf, 0), bump(cf, 1)].concat();
        let g: Vec<f64> = [bump(cg, 1), bump(cg, 0)].concat();
        let pair = adjoint_pair(&m, &grid, 0.0, &f, &g).unwrap();
        prop_assert!(pair.relative < 1e-10 || (pair.forward - pair.adjoint).abs() < 1e-12);
    }

    #[test]
    fn total_variation_is_a_bounded_symmetric_distance(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::parse("-2:2:10").unwrap();
        let regimes = RegimeSet::numbered(2);
        let mut draw = || Marginal::from_weights(&grid, &regimes, (0..20).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap().normalized().unwrap();
        let (a, b) = (draw(), draw());
        let ab = a.total_variation(&b).unwrap();
        prop_assert!((ab - b.total_variation(&a).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!(a.total_variation(&a).unwrap() == 0.0);
        prop_assert!((a.total_mass() - 1.0).abs() < 1e-12);
    }
}
