use proptest::prelude::*;
use sve_core::coefficients::Coefficient;
use sve_core::engine::{InitialCondition, Model, SimConfig, Simulator};
use sve_core::kernels::KernelSpec;
use sve_core::martingale::{compute_mf, generator, martingale_test, MartingaleOptions, TestFunction};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generator_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, cf in -1.0f64..1.0, cg in -1.0f64..1.0,
                           hf in 0.2f64..2.0, hg in 0.2f64..2.0, t in 0.0f64..1.0, x in -3.0f64..3.0, z in -3.0f64..3.0) {
        let f = TestFunction::bump(cf, hf).unwrap();
        let g = TestFunction::bump(cg, hg).unwrap();
        let (f1, g1, f2, g2, f3, g3) = (f.clone(), g.clone(), f.clone(), g.clone(), f.clone(), g.clone());
        let combo = TestFunction::new(
            "af+bg",
            f.support_radius().max(g.support_radius()),
            move |z| a * f1.f(z) + b * g1.f(z),
            move |z| a * f2.df(z) + b * g2.df(z),
            move |z| a * f3.d2f(z) + b * g3.d2f(z),
        ).unwrap();
        let mu = Coefficient::linear(1.0, -1.0).unwrap();
        let sigma = Coefficient::sqrt_abs();
        let lhs = generator(&mu, &sigma, &combo, t, x, z);
        let rhs = a * generator(&mu, &sigma, &f, t, x, z) + b * generator(&mu, &sigma, &g, t, x, z);
        let scale = 1.0 + (a * generator(&mu, &sigma, &f, t, x, z)).abs() + (b * generator(&mu, &sigma, &g, t, x, z)).abs();
        prop_assert!((lhs - rhs).abs() <= 1e-13 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn bumps_validate(c in -5.0f64..5.0, h in 0.05f64..5.0) {
        prop_assert!(TestFunction::bump(c, h).unwrap().validate().passed);
    }

    #[test]
    fn zero_function_gives_zero_process(seed in any::<u64>(), alpha in 0.0f64..0.45) {
        let model = Model::new(
            Coefficient::linear(1.0, -1.0).unwrap(),
            Coefficient::sqrt_abs(),
            KernelSpec::constant(1.0, 1.0).unwrap(),
            KernelSpec::fractional(alpha, 1.0).unwrap(),
        );
        let cfg = SimConfig::new(1.0, 32, 1, seed).with_x0(InitialCondition::Constant(1.0));
        let b = Simulator::new(cfg, model.clone()).unwrap().path(0).unwrap();
        prop_assert!(compute_mf(&b, &model.mu, &model.sigma, &TestFunction::zero()).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn non_linear_model_with_unit_kernels_passes() {
    let mu = Coefficient::linear(1.0, -1.0).unwrap();
    let sigma = Coefficient::sqrt_abs();
    let one = KernelSpec::constant(1.0, 1.0).unwrap();
    let cfg = SimConfig::new(1.0, 128, 5000, 13).with_x0(InitialCondition::Constant(1.0));
    let ens = Simulator::new(cfg, Model::new(mu.clone(), sigma.clone(), one.clone(), one)).unwrap().simulate().unwrap();
    let battery = TestFunction::default_battery(-1.5, 1.5).unwrap();
    let reports = martingale_test(&ens, &mu, &sigma, &battery, &MartingaleOptions::default()).unwrap();
    for r in &reports {
        assert!(r.passed, "{}: max|z| {}", r.f, r.max_abs_z);
    }
}
