use proptest::prelude::*;
use sve_core::coefficients::{
    default_quadrature_order, mollifier_density, mollify, Coefficient,
};
use sve_core::quadrature::SymmetricRule;

#[test]
fn density_has_unit_mass_up_to_level_fifty() {
    for n in 1..=50u32 {
        let rule = SymmetricRule::new(default_quadrature_order(n));
        let mass = rule.integrate(|y| mollifier_density(n, y));
        assert!((mass - 1.0).abs() <= 1e-12, "n={n}: {mass}");
    }
}

fn odd_families() -> Vec<Coefficient> {
    vec![
        Coefficient::linear(0.0, -2.5).unwrap(),
        Coefficient::sin_tx(),
        Coefficient::new("cubic-root", 1.0, |_, x: f64| x.cbrt()).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn odd_functions_mollify_to_zero_at_origin(n in 1u32..30, extra in 0usize..6, t in 0.0f64..1.0) {
        for f in odd_families() {
            let m = mollify(&f, n, default_quadrature_order(n) + extra).unwrap();
            prop_assert_eq!(m.eval(t, 0.0), 0.0);
        }
    }

    #[test]
    fn growth_doubling_is_never_exceeded(n in 1u32..20, t in 0.0f64..1.0, x in -25.0f64..25.0) {
        for f in [
            Coefficient::sqrt_abs(),
            Coefficient::sin_tx(),
            Coefficient::cir_drift(2.0, 0.5).unwrap(),
            Coefficient::linear(1.0, -1.0).unwrap(),
        ] {
            let m = mollify(&f, n, default_quadrature_order(n)).unwrap();
            prop_assert!(m.eval(t, x).abs() <= 2.0 * f.growth() * (1.0 + x.abs()));
        }
    }

    #[test]
    fn support_is_exactly_the_cutoff_band(n in 1u32..20, t in 0.0f64..1.0, beyond in 0.0f64..50.0, sign in prop::bool::ANY) {
        let x = (n as f64 + 1.0 + beyond) * if sign { 1.0 } else { -1.0 };
        let m = mollify(&Coefficient::sqrt_abs(), n, default_quadrature_order(n)).unwrap();
        prop_assert_eq!(m.eval(t, x), 0.0);
    }

    #[test]
    fn constants_are_reproduced_on_the_plateau(c in -5.0f64..5.0, n in 1u32..20, frac in -1.0f64..1.0) {
        let m = mollify(&Coefficient::constant(c).unwrap(), n, default_quadrature_order(n)).unwrap();
        let x = frac * n as f64;
        prop_assert!((m.eval(0.0, x) - c).abs() <= 1e-13 * c.abs().max(1.0));
    }
}
