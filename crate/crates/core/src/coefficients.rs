//! Drift and diffusion coefficients `(t, x) ↦ f(t, x)` with a declared
//! linear-growth constant, and their explicit Lipschitz mollification
//!
//! ```text
//! f_n(t, x) = φ_n(x) ∫ f(t, x - y) δ_n(y) dy,    δ_n(y) = (1 - y²)^n / c_n on [-1, 1]
//! ```
//!
//! where `φ_n` is a C² cutoff equal to one on `[-n, n]` and zero outside
//! `(-n-1, n+1)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::quadrature::SymmetricRule;
use crate::report::{witness, CheckReport, Measurement};
use crate::stats::PiecewiseLinear;

pub type CoefficientFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A coefficient together with the constant `C` in `|f(t,x)| <= C (1 + |x|)`.
#[derive(Clone)]
pub struct Coefficient {
    label: String,
    growth: f64,
    eval: CoefficientFn,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficient")
            .field("label", &self.label)
            .field("growth", &self.growth)
            .finish()
    }
}

impl Coefficient {
    pub fn new(
        label: impl Into<String>,
        growth: f64,
        eval: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(growth > 0.0 && growth.is_finite()) {
            return Err(invalid(format!("growth constant must be positive, got {growth}")));
        }
        Ok(Self {
            label: label.into(),
            growth,
            eval: Arc::new(eval),
        })
    }

    /// `a + b x`.
    pub fn linear(a: f64, b: f64) -> Result<Self> {
        let growth = a.abs().max(b.abs());
        Self::new(format!("linear{{a={a},b={b}}}"), nonzero(growth), move |_, x| a + b * x)
    }

    /// `√|x|`.
    pub fn sqrt_abs() -> Self {
        Self::new("sqrt_abs", 1.0, |_, x: f64| x.abs().sqrt()).expect("valid constant")
    }

    /// Mean-reverting drift `κ (θ - x)`.
    pub fn cir_drift(kappa: f64, theta: f64) -> Result<Self> {
        let growth = kappa.abs() * theta.abs().max(1.0);
        Self::new(format!("cir_drift{{kappa={kappa},theta={theta}}}"), nonzero(growth), move |_, x| {
            kappa * (theta - x)
        })
    }

    /// `sin(t x)`.
    pub fn sin_tx() -> Self {
        Self::new("sin_tx", 1.0, |t: f64, x: f64| (t * x).sin()).expect("valid constant")
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(format!("constant{{c={c}}}"), nonzero(c.abs()), move |_, _| c)
    }

    /// Time-independent piecewise-linear interpolant in `x`, flat outside the knots.
    pub fn table(knots: &[f64], values: &[f64]) -> Result<Self> {
        if knots.len() != values.len() || knots.is_empty() {
            return Err(invalid("coefficient table needs equally many knots and values"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("coefficient table knots must be strictly increasing"));
        }
        if knots.iter().chain(values).any(|v| !v.is_finite()) {
            return Err(invalid("coefficient table entries must be finite"));
        }
        let table = PiecewiseLinear::new(knots.to_vec(), values.to_vec());
        // |f| / (1 + |x|) peaks at a knot or at x = 0 on a piecewise-linear f.
        let growth = knots
            .iter()
            .chain(std::iter::once(&0.0))
            .map(|&x| table.value(x).abs() / (1.0 + x.abs()))
            .fold(0.0, f64::max);
        Self::new(format!("table{{knots={}}}", knots.len()), nonzero(growth), move |_, x| {
            table.value(x)
        })
    }

    /// Same function with a different declared growth constant.
    pub fn with_growth(mut self, growth: f64) -> Result<Self> {
        if !(growth > 0.0 && growth.is_finite()) {
            return Err(invalid(format!("growth constant must be positive, got {growth}")));
        }
        self.growth = growth;
        Ok(self)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        (self.eval)(t, x)
    }
}

fn nonzero(c: f64) -> f64 {
    if c > 0.0 {
        c
    } else {
        1.0
    }
}

/// `c_n = ∫_{-1}^{1} (1 - y²)^n dy`.
pub fn mollifier_mass(n: u32) -> f64 {
    (1..=n).fold(2.0, |c, k| c * (2 * k) as f64 / (2 * k + 1) as f64)
}

/// `δ_n(y) = (1 - y²)^n / c_n` on `[-1, 1]`, zero outside.
pub fn mollifier_density(n: u32, y: f64) -> f64 {
    if y.abs() >= 1.0 {
        return 0.0;
    }
    (1.0 - y * y).powi(n as i32) / mollifier_mass(n)
}

/// C² cutoff: one on `[-n, n]`, zero outside `(-n-1, n+1)`, quintic in between.
pub fn cutoff(n: u32, x: f64) -> f64 {
    let u = x.abs() - n as f64;
    if u <= 0.0 {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        1.0 - u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    }
}

/// Smallest admissible Gauss–Legendre order for level `n`.
pub fn default_quadrature_order(n: u32) -> usize {
    2 * n as usize + 2
}

/// `f_n` for one level `n`.
#[derive(Clone)]
pub struct MollifiedCoefficient {
    base: Coefficient,
    level: u32,
    order: usize,
    mass: f64,
    center: f64,
    /// `(y_k, w_k δ_n(y_k))` renormalized to total mass one.
    nodes: Vec<(f64, f64)>,
}

impl fmt::Debug for MollifiedCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MollifiedCoefficient")
            .field("base", &self.base)
            .field("level", &self.level)
            .field("order", &self.order)
            .finish()
    }
}

/// Grid on which `mollify` samples the base coefficient for its growth check.
const GROWTH_SAMPLES_T: usize = 11;
const GROWTH_SAMPLES_X: usize = 401;
const GROWTH_SLACK: f64 = 0.01;

/// Mollifies `f` at level `n`, checking its growth bound on `[0, 1]`.
pub fn mollify(f: &Coefficient, n: u32, quadrature_order: usize) -> Result<MollifiedCoefficient> {
    mollify_on(f, n, quadrature_order, 1.0)
}

/// As [`mollify`], sampling the growth bound over `t ∈ [0, horizon]`.
pub fn mollify_on(f: &Coefficient, n: u32, quadrature_order: usize, horizon: f64) -> Result<MollifiedCoefficient> {
    if n == 0 {
        return Err(invalid("mollification level must be at least 1"));
    }
    let min_order = default_quadrature_order(n);
    if quadrature_order < min_order {
        return Err(invalid(format!(
            "quadrature order {quadrature_order} is below 2n+2 = {min_order}"
        )));
    }
    let reach = n as f64 + 2.0;
    for it in 0..GROWTH_SAMPLES_T {
        let t = horizon * it as f64 / (GROWTH_SAMPLES_T - 1) as f64;
        for ix in 0..GROWTH_SAMPLES_X {
            let x = -reach + 2.0 * reach * ix as f64 / (GROWTH_SAMPLES_X - 1) as f64;
            let value = f.eval(t, x).abs();
            let bound = f.growth() * (1.0 + x.abs());
            if !(value <= bound * (1.0 + GROWTH_SLACK)) {
                return Err(Error::GrowthViolation {
                    label: f.label().to_string(),
                    t,
                    x,
                    value,
                    bound,
                });
            }
        }
    }
    let rule = SymmetricRule::new(quadrature_order);
    let mass = mollifier_mass(n);
    let density = |y: f64| (1.0 - y * y).powi(n as i32) / mass;
    let mut center = rule.center_weight().map_or(0.0, |w| w * density(0.0));
    let mut nodes: Vec<(f64, f64)> = rule.pairs().iter().map(|&(y, w)| (y, w * density(y))).collect();
    let total = center + 2.0 * nodes.iter().map(|(_, w)| w).sum::<f64>();
    center /= total;
    for node in &mut nodes {
        node.1 /= total;
    }
    Ok(MollifiedCoefficient {
        base: f.clone(),
        level: n,
        order: quadrature_order,
        mass,
        center,
        nodes,
    })
}

impl MollifiedCoefficient {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn quadrature_order(&self) -> usize {
        self.order
    }

    /// Cached `c_n`.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn base(&self) -> &Coefficient {
        &self.base
    }

    /// Sum of the discrete mollifier weights (one up to rounding).
    pub fn weight_sum(&self) -> f64 {
        self.center + 2.0 * self.nodes.iter().map(|(_, w)| w).sum::<f64>()
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let phi = cutoff(self.level, x);
        if phi == 0.0 {
            return 0.0;
        }
        let mut sum = if self.center > 0.0 {
            self.center * self.base.eval(t, x)
        } else {
            0.0
        };
        for &(y, w) in &self.nodes {
            sum += w * (self.base.eval(t, x - y) + self.base.eval(t, x + y));
        }
        phi * sum
    }

    /// `f_n` as a plain coefficient with growth constant `2C`.
    pub fn into_coefficient(self) -> Coefficient {
        let label = format!("{}@n={}", self.base.label(), self.level);
        let growth = 2.0 * self.base.growth();
        let this = Arc::new(self);
        Coefficient::new(label, growth, move |t, x| this.eval(t, x)).expect("positive growth")
    }
}

/// Grid and tolerances for [`verify_mollified_properties`].
#[derive(Debug, Clone, PartialEq)]
pub struct MollifyCheckOptions {
    pub horizon: f64,
    pub t_points: usize,
    pub x_points: usize,
    /// Allowed increase of the sup error between consecutive levels.
    pub monotone_tolerance: f64,
    /// Required sup error at the largest level.
    pub final_tolerance: f64,
}

impl Default for MollifyCheckOptions {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            t_points: 11,
            x_points: 801,
            monotone_tolerance: 1e-6,
            final_tolerance: 0.5,
        }
    }
}

/// Grid certificate for growth doubling, finite Lipschitz constants and
/// locally uniform convergence of `f_n → f` on `[0, T] × [-r, r]`.
pub fn verify_mollified_properties(
    f: &Coefficient,
    levels: &[u32],
    r: f64,
    opts: &MollifyCheckOptions,
) -> CheckReport {
    let mut report = CheckReport::new("mollifier-approximation");
    report.tolerances.insert("monotone".into(), opts.monotone_tolerance);
    report.tolerances.insert("final_error".into(), opts.final_tolerance);
    report.tolerances.insert("growth_ratio".into(), 2.0 * f.growth());
    if levels.is_empty() || !(r > 0.0) {
        report.fail("need at least one level and a positive radius");
        return report;
    }
    let nt = opts.t_points.max(1);
    let nx = opts.x_points.max(2);
    let ts: Vec<f64> = (0..nt)
        .map(|i| if nt == 1 { 0.0 } else { opts.horizon * i as f64 / (nt - 1) as f64 })
        .collect();
    let xs: Vec<f64> = (0..nx).map(|i| -r + 2.0 * r * i as f64 / (nx - 1) as f64).collect();

    let mut previous_error: Option<f64> = None;
    let mut worst_growth = (0.0f64, 0.0, 0.0);
    for &n in levels {
        let fn_ = match mollify_on(f, n, default_quadrature_order(n), opts.horizon) {
            Ok(m) => m,
            Err(e) => {
                report.fail(format!("level {n}: {e}"));
                return report;
            }
        };
        let mut sup_error = 0.0f64;
        let mut lipschitz = 0.0f64;
        let mut growth = 0.0f64;
        for &t in &ts {
            let row: Vec<f64> = xs.iter().map(|&x| fn_.eval(t, x)).collect();
            for (i, (&x, &v)) in xs.iter().zip(&row).enumerate() {
                sup_error = sup_error.max((f.eval(t, x) - v).abs());
                let ratio = v.abs() / (1.0 + x.abs());
                growth = growth.max(ratio);
                if ratio > worst_growth.0 {
                    worst_growth = (ratio, t, x);
                }
                if i > 0 {
                    // adjacent quotients bound every pairwise quotient on the grid
                    lipschitz = lipschitz.max((v - row[i - 1]).abs() / (x - xs[i - 1]));
                }
            }
        }
        let level = n as f64;
        report.measure(Measurement::new("sup_error", sup_error).at(level));
        report.measure(Measurement::new("lipschitz", lipschitz).at(level));
        report.measure(Measurement::new("growth_ratio", growth).at(level));
        if !(growth <= 2.0 * f.growth()) {
            report.fail(format!("level {n}: |f_n|/(1+|x|) reaches {growth} > 2C = {}", 2.0 * f.growth()));
        }
        if !lipschitz.is_finite() {
            report.fail(format!("level {n}: empirical Lipschitz constant is not finite"));
        }
        if let Some(prev) = previous_error {
            if sup_error > prev + opts.monotone_tolerance {
                report.fail(format!("level {n}: sup error rose from {prev} to {sup_error}"));
            }
        }
        previous_error = Some(sup_error);
    }
    report.witness = Some(witness([("t", worst_growth.1), ("x", worst_growth.2)]));
    let last = previous_error.expect("levels is nonempty");
    if last > opts.final_tolerance {
        report.fail(format!("sup error {last} at the largest level exceeds {}", opts.final_tolerance));
    }
    report
}

/// Checks `|f(t,x)| <= C (1 + |x|)` at every `(t, x)` in `grid`.
pub fn verify_linear_growth(f: &Coefficient, grid: &[(f64, f64)]) -> CheckReport {
    let mut report = CheckReport::new("coefficient-linear-growth");
    report.tolerances.insert("ratio".into(), 1.0);
    let mut worst = (0.0f64, f64::NAN, f64::NAN);
    for &(t, x) in grid {
        let ratio = f.eval(t, x).abs() / (f.growth() * (1.0 + x.abs()));
        if !(ratio <= worst.0) {
            worst = (ratio, t, x);
        }
    }
    report.measure(Measurement::new("worst_ratio", worst.0));
    if !grid.is_empty() {
        report.witness = Some(witness([("t", worst.1), ("x", worst.2)]));
    }
    if !(worst.0 <= 1.0) {
        report.fail(format!(
            "|{}| exceeds C(1+|x|) by a factor {} at (t={}, x={})",
            f.label(),
            worst.0,
            worst.1,
            worst.2
        ));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mass_examples() {
        assert_eq!(mollifier_mass(0), 2.0);
        assert_relative_eq!(mollifier_mass(1), 4.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(mollifier_mass(2), 16.0 / 15.0, max_relative = 1e-15);
    }

    #[test]
    fn density_examples() {
        assert_relative_eq!(mollifier_density(1, 0.0), 0.75, max_relative = 1e-15);
        for n in [1, 4, 9] {
            assert_eq!(mollifier_density(n, 1.0), 0.0);
            assert_eq!(mollifier_density(n, 2.0), 0.0);
        }
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff(3, 2.5), 1.0);
        assert_eq!(cutoff(3, 4.2), 0.0);
        assert_eq!(cutoff(3, 3.5), 0.5);
        assert_eq!(cutoff(3, -3.5), 0.5);
    }

    #[test]
    fn cutoff_is_c2_at_band_edges() {
        let h = 1e-5;
        for edge in [3.0, 4.0] {
            let d1 = (cutoff(3, edge + h) - cutoff(3, edge - h)) / (2.0 * h);
            let d2 = (cutoff(3, edge + h) - 2.0 * cutoff(3, edge) + cutoff(3, edge - h)) / (h * h);
            assert!(d1.abs() < 1e-8 && d2.abs() < 1e-3, "edge {edge}: {d1} {d2}");
        }
    }

    #[test]
    fn mollify_examples() {
        let id = Coefficient::linear(0.0, 1.0).unwrap();
        let m = mollify(&id, 5, 12).unwrap();
        assert_relative_eq!(m.eval(0.0, 2.0), 2.0, max_relative = 1e-14);
        let c = Coefficient::constant(1.7).unwrap();
        let m = mollify(&c, 5, 12).unwrap();
        for x in [-5.0, -1.3, 0.0, 4.9] {
            assert_relative_eq!(m.eval(0.3, x), 1.7, max_relative = 1e-14);
        }
    }

    #[test]
    fn second_moment_matches_riemann_oracle() {
        // ∫ y² δ_2(y) dy by a 1e6-point midpoint sum
        let cells = 1_000_000;
        let h = 2.0 / cells as f64;
        let oracle: f64 = (0..cells)
            .map(|i| {
                let y = -1.0 + (i as f64 + 0.5) * h;
                y * y * mollifier_density(2, y) * h
            })
            .sum();
        let sq = Coefficient::new("x^2", 1.0, |_, x: f64| x * x).unwrap();
        // growth check only samples out to n+2 = 4, where x² > C(1+|x|)
        let sq = sq.with_growth(5.0).unwrap();
        let m = mollify(&sq, 2, 6).unwrap();
        assert!((m.eval(0.0, 0.0) - oracle).abs() < 1e-8, "{} vs {oracle}", m.eval(0.0, 0.0));
        // closed form: 1/(2n+3) = 1/7
        assert_relative_eq!(m.eval(0.0, 0.0), 1.0 / 7.0, max_relative = 1e-13);
    }

    #[test]
    fn mollify_rejects_low_order_and_growth_violations() {
        let id = Coefficient::linear(0.0, 1.0).unwrap();
        assert!(mollify(&id, 5, 11).is_err());
        let liar = Coefficient::new("x^2", 1.0, |_, x: f64| x * x).unwrap();
        match mollify(&liar, 2, 6) {
            Err(Error::GrowthViolation { x, .. }) => assert!(x.abs() > 1.0),
            other => panic!("expected a growth violation, got {other:?}"),
        }
    }

    #[test]
    fn support_is_exact() {
        let m = mollify(&Coefficient::sqrt_abs(), 3, 8).unwrap();
        for x in [4.0, -4.0, 4.5, 100.0] {
            assert_eq!(m.eval(0.2, x), 0.0);
        }
        assert!(m.eval(0.2, 3.9) > 0.0);
    }

    #[test]
    fn mollified_properties_examples() {
        let opts = MollifyCheckOptions::default();
        let levels = [1, 2, 4, 8, 16];
        let r = verify_mollified_properties(&Coefficient::sqrt_abs(), &levels, 1.0, &opts);
        assert!(r.passed, "{:?}", r.notes);
        let r = verify_mollified_properties(&Coefficient::linear(0.0, 1.0).unwrap(), &[4, 8], 2.0, &opts);
        assert!(r.passed, "{:?}", r.notes);
        for m in r.measurements.iter().filter(|m| m.quantity == "sup_error") {
            assert!(m.value < 1e-13);
        }
        let r = verify_mollified_properties(&Coefficient::sin_tx(), &levels, 1.0, &opts);
        assert!(r.passed, "{:?}", r.notes);
    }

    #[test]
    fn linear_growth_examples() {
        let grid: Vec<(f64, f64)> = (0..=40).map(|i| (0.5, -10.0 + 0.5 * i as f64)).collect();
        assert!(verify_linear_growth(&Coefficient::sqrt_abs(), &grid).passed);
        let sq = Coefficient::new("x^2", 1.0, |_, x: f64| x * x).unwrap();
        let r = verify_linear_growth(&sq, &grid);
        assert!(!r.passed);
        assert_eq!(r.witness.unwrap()["x"].abs(), 10.0);
        assert!(verify_linear_growth(&Coefficient::constant(0.0).unwrap(), &grid).passed);
    }

    #[test]
    fn table_growth_constant_is_tight() {
        let f = Coefficient::table(&[-1.0, 0.5, 2.0], &[2.0, -1.0, 3.0]).unwrap();
        assert_relative_eq!(f.growth(), 1.0, max_relative = 1e-15);
        let grid: Vec<(f64, f64)> = (0..=400).map(|i| (0.0, -5.0 + 0.025 * i as f64)).collect();
        assert!(verify_linear_growth(&f, &grid).passed);
    }
}
