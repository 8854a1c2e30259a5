use proptest::prelude::*;
use sve_core::coefficients::Coefficient;
use sve_core::diagnostics::{
    convergence_report, fubini_identity_residual, holder_estimate, ibp_identity_residual, moment_sup,
};
use sve_core::engine::{
    mollified_sequence, InitialCondition, Model, Scheme, SimConfig, Simulator,
};
use sve_core::kernels::KernelSpec;
use sve_core::stats::linear_fit;

fn one() -> KernelSpec {
    KernelSpec::constant(1.0, 1.0).unwrap()
}

fn brownian(steps: usize, paths: u64) -> sve_core::engine::Ensemble {
    let model = Model::new(Coefficient::constant(0.0).unwrap(), Coefficient::constant(1.0).unwrap(), one(), one());
    Simulator::new(SimConfig::new(1.0, steps, paths, 17), model).unwrap().simulate().unwrap()
}

#[test]
fn brownian_moments_grow_in_q() {
    let ens = brownian(64, 5000);
    let values: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|&q| moment_sup(&ens, q).unwrap().value).collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
}

#[test]
fn brownian_holder_slope_is_half_the_moment_order() {
    let ens = brownian(512, 2000);
    for p in [2.0, 4.0] {
        let r = holder_estimate(&ens, p, &InitialCondition::Constant(0.0)).unwrap();
        assert!((r.slope - p / 2.0).abs() <= 0.05 * p, "p={p}: slope {}", r.slope);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identities_are_exact_for_constant_kernels(seed in any::<u64>(), left in any::<bool>(), c in 0.2f64..3.0) {
        let k = KernelSpec::constant(c, 1.0).unwrap();
        let mu = Coefficient::linear(1.0, -1.0).unwrap();
        let x0 = InitialCondition::Cos;
        let scheme = if left { Scheme::LeftPoint } else { Scheme::KernelAveraged };
        let cfg = SimConfig::new(1.0, 64, 3, seed).with_x0(x0.clone()).with_scheme(scheme);
        let sim = Simulator::new(cfg, Model::new(mu.clone(), Coefficient::sqrt_abs(), k.clone(), k.clone())).unwrap();
        for i in 0..3 {
            let b = sim.path(i).unwrap();
            let ibp = ibp_identity_residual(&b, &x0, &k, &k, &mu, sim.scheme()).unwrap();
            prop_assert!(ibp <= 1e-13, "ibp {ibp}");
            prop_assert!(fubini_identity_residual(&b, &x0, &k, &k).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn fubini_is_exact_under_kernel_averaging(seed in any::<u64>(), alpha in 0.05f64..0.45, lambda in 0.1f64..3.0) {
        let k_sigma = KernelSpec::fractional(alpha, 1.0).unwrap();
        let k_mu = KernelSpec::exponential(lambda, 1.0).unwrap();
        let x0 = InitialCondition::Constant(1.0);
        let cfg = SimConfig::new(1.0, 128, 2, seed).with_x0(x0.clone());
        let model = Model::new(Coefficient::linear(1.0, -1.0).unwrap(), Coefficient::sqrt_abs(), k_mu.clone(), k_sigma.clone());
        let sim = Simulator::new(cfg, model).unwrap();
        for i in 0..2 {
            let r = fubini_identity_residual(&sim.path(i).unwrap(), &x0, &k_mu, &k_sigma).unwrap();
            prop_assert!(r <= 1e-12, "{r}");
        }
    }
}

#[test]
fn ibp_residual_shrinks_under_refinement_for_exponential_kernels() {
    let k = KernelSpec::exponential(1.0, 1.0).unwrap();
    let mu = Coefficient::constant(0.0).unwrap();
    let x0 = InitialCondition::Constant(0.0);
    let steps = [128usize, 256, 512, 1024];
    let mut logs = Vec::new();
    for &n in &steps {
        let sim = Simulator::new(SimConfig::new(1.0, n, 50, 3), Model::new(mu.clone(), Coefficient::constant(1.0).unwrap(), one(), k.clone())).unwrap();
        let mean: f64 = (0..50)
            .map(|i| ibp_identity_residual(&sim.path(i).unwrap(), &x0, &one(), &k, &mu, sim.scheme()).unwrap())
            .sum::<f64>()
            / 50.0;
        logs.push(mean.ln());
    }
    let lx: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let fit = linear_fit(&lx, &logs).unwrap();
    assert!(-fit.slope >= 0.5 && fit.r_squared >= 0.95, "{fit:?}");
}

#[test]
fn affine_model_is_untouched_beyond_the_plateau() {
    let cfg = SimConfig::new(1.0, 128, 200, 8).with_x0(InitialCondition::Constant(1.0));
    let model = Model::new(
        Coefficient::linear(1.0, -1.0).unwrap(),
        Coefficient::constant(0.5).unwrap(),
        one(),
        KernelSpec::exponential(1.0, 1.0).unwrap(),
    );
    let seq = mollified_sequence(cfg, model, &[16, 32]).unwrap().simulate().unwrap();
    let r = convergence_report(&seq, 1.0).unwrap();
    assert!(r.pairs[0].q90_sup_diff < 1e-10, "{:?}", r.pairs[0]);
}
