//! Martingale-problem checks on simulated paths.
//!
//! For a test function `f ∈ C²₀` the process
//!
//! ```text
//! M^f_t = f(Z_t) - ∫_0^t (μ(s,X_s) f'(Z_s) + ½ σ(s,X_s)² f''(Z_s)) ds
//! ```
//!
//! must be a martingale. Because `f` has compact support the increments are
//! bounded on the grid, so the reports test the true martingale property of
//! this bounded object: `E[g · (M^f_{t+h} - M^f_t)] = 0` for adapted `g`.
//! The same paths also give the quadratic-variation check
//! `Σ (ΔM)² ≈ Σ σ(t_j, X_j)² Δt`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coefficients::Coefficient;
use crate::engine::{Ensemble, PathBundle, PathStatistic};
use crate::error::{invalid, Error, Result};
use crate::report::{CheckReport, Measurement, Tabular};
use crate::stats::{median, quantile_sorted, Moments};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A C² function with compact support, given with its first two derivatives.
#[derive(Clone)]
pub struct TestFunction {
    label: String,
    support_radius: f64,
    f: ScalarFn,
    df: ScalarFn,
    d2f: ScalarFn,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("label", &self.label)
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        label: impl Into<String>,
        support_radius: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(support_radius > 0.0 && support_radius.is_finite()) {
            return Err(invalid(format!("support radius must be positive, got {support_radius}")));
        }
        Ok(Self {
            label: label.into(),
            support_radius,
            f: Arc::new(f),
            df: Arc::new(df),
            d2f: Arc::new(d2f),
        })
    }

    /// `(1 - u²)^4` with `u = (z - center) / half_width`, zero for `|u| >= 1`.
    pub fn bump(center: f64, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite() && center.is_finite()) {
            return Err(invalid(format!("bump needs a finite center and positive width, got ({center}, {half_width})")));
        }
        let h = half_width;
        let u = move |z: f64| (z - center) / h;
        Self::new(
            format!("bump{{center={center:.4},width={h:.4}}}"),
            center.abs() + h,
            move |z| {
                let u = u(z);
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - u * u).powi(4)
                }
            },
            move |z| {
                let u = u(z);
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    -8.0 * u * (1.0 - u * u).powi(3) / h
                }
            },
            move |z| {
                let u = u(z);
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    -8.0 * (1.0 - u * u).powi(2) * (1.0 - 7.0 * u * u) / (h * h)
                }
            },
        )
    }

    /// The identically zero function.
    pub fn zero() -> Self {
        Self::new("zero", 1.0, |_| 0.0, |_| 0.0, |_| 0.0).expect("valid radius")
    }

    /// Six bumps whose supports cover `[lo, hi]` at several widths and offsets.
    pub fn default_battery(lo: f64, hi: f64) -> Result<Vec<Self>> {
        if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
            return Err(invalid(format!("battery range [{lo}, {hi}] is not a finite interval")));
        }
        let c = 0.5 * (lo + hi);
        let s = (0.5 * (hi - lo)).max(1e-3);
        [
            (0.0, 1.0),
            (0.0, 0.5),
            (-0.5, 0.5),
            (0.5, 0.5),
            (-0.25, 0.75),
            (0.25, 0.25),
        ]
        .iter()
        .map(|&(offset, width)| Self::bump(c + offset * s, width * s))
        .collect()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    #[inline]
    pub fn f(&self, z: f64) -> f64 {
        (self.f)(z)
    }

    #[inline]
    pub fn df(&self, z: f64) -> f64 {
        (self.df)(z)
    }

    #[inline]
    pub fn d2f(&self, z: f64) -> f64 {
        (self.d2f)(z)
    }

    /// Checks vanishing at `±R` and `f''` against central differences of `f'`.
    pub fn validate(&self) -> CheckReport {
        const EDGE_TOL: f64 = 1e-10;
        const FD_TOL: f64 = 1e-6;
        const FD_STEP: f64 = 1e-4;
        const POINTS: usize = 401;
        let mut report = CheckReport::new("test-function-regularity");
        report.tolerances.insert("edge".into(), EDGE_TOL);
        report.tolerances.insert("second_derivative".into(), FD_TOL);
        let r = self.support_radius;
        let mut edge = 0.0f64;
        for z in [-r, r] {
            edge = edge.max(self.f(z).abs()).max(self.df(z).abs()).max(self.d2f(z).abs());
        }
        report.measure(Measurement::new("edge_value", edge));
        if !(edge <= EDGE_TOL) {
            report.fail(format!("f, f' or f'' does not vanish at ±{r}: {edge:e}"));
        }
        let zs: Vec<f64> = (0..POINTS)
            .map(|k| -r + 2.0 * r * k as f64 / (POINTS - 1) as f64)
            .collect();
        let scale = zs.iter().map(|&z| self.d2f(z).abs()).fold(1.0, f64::max);
        let central = |z: f64, h: f64| (self.df(z + h) - self.df(z - h)) / (2.0 * h);
        let mut worst = 0.0f64;
        for &z in &zs {
            // Richardson combination of steps h and h/2 cancels the h² term
            let fd = (4.0 * central(z, 0.5 * FD_STEP) - central(z, FD_STEP)) / 3.0;
            worst = worst.max((fd - self.d2f(z)).abs() / scale);
        }
        report.measure(Measurement::new("second_derivative_gap", worst));
        if !(worst <= FD_TOL) {
            report.fail(format!("f'' disagrees with the derivative of f' by {worst:e}"));
        }
        report
    }
}

/// `(t, x, z) ↦ μ(t,x) f'(z) + w σ(t,x)² f''(z)` with `w = ½` for the true generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Generator {
    pub diffusion_weight: f64,
}

impl Default for Generator {
    fn default() -> Self {
        Self { diffusion_weight: 0.5 }
    }
}

impl Generator {
    /// A generator with a wrong diffusion weight, for power checks.
    pub fn with_diffusion_weight(diffusion_weight: f64) -> Self {
        Self { diffusion_weight }
    }

    #[inline]
    pub fn apply(&self, drift: f64, vol: f64, f: &TestFunction, z: f64) -> f64 {
        drift * f.df(z) + self.diffusion_weight * vol * vol * f.d2f(z)
    }

    pub fn eval(&self, mu: &Coefficient, sigma: &Coefficient, f: &TestFunction, t: f64, x: f64, z: f64) -> f64 {
        self.apply(mu.eval(t, x), sigma.eval(t, x), f, z)
    }
}

/// `μ(t,x) f'(z) + ½ σ(t,x)² f''(z)`.
pub fn generator(mu: &Coefficient, sigma: &Coefficient, f: &TestFunction, t: f64, x: f64, z: f64) -> f64 {
    Generator::default().eval(mu, sigma, f, t, x, z)
}

fn mf_from_levels(bundle: &PathBundle, drift: &[f64], vol: &[f64], f: &TestFunction, gen: &Generator, out: &mut [f64]) {
    let dt = bundle.dt();
    let mut integral = 0.0;
    out[0] = f.f(bundle.z[0]);
    for i in 1..bundle.z.len() {
        let j = i - 1;
        integral += gen.apply(drift[j], vol[j], f, bundle.z[j]) * dt;
        out[i] = f.f(bundle.z[i]) - integral;
    }
}

fn coefficient_levels(bundle: &PathBundle, mu: &Coefficient, sigma: &Coefficient) -> (Vec<f64>, Vec<f64>) {
    let n = bundle.steps();
    let mut drift = Vec::with_capacity(n);
    let mut vol = Vec::with_capacity(n);
    for j in 0..n {
        let (t, x) = (bundle.grid[j], bundle.x[j]);
        drift.push(mu.eval(t, x));
        vol.push(sigma.eval(t, x));
    }
    (drift, vol)
}

/// `M^f_{t_i} = f(Z_{t_i}) - Σ_{j<i} 𝒜^f(t_j, X_j, Z_j) Δt`.
pub fn compute_mf(bundle: &PathBundle, mu: &Coefficient, sigma: &Coefficient, f: &TestFunction) -> Vec<f64> {
    compute_mf_with(&Generator::default(), bundle, mu, sigma, f)
}

pub fn compute_mf_with(
    gen: &Generator,
    bundle: &PathBundle,
    mu: &Coefficient,
    sigma: &Coefficient,
    f: &TestFunction,
) -> Vec<f64> {
    let (drift, vol) = coefficient_levels(bundle, mu, sigma);
    let mut out = vec![0.0; bundle.z.len()];
    mf_from_levels(bundle, &drift, &vol, f, gen, &mut out);
    out
}

/// Adapted statistic `g` evaluated at the start of a lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    One,
    X,
    Z,
    FPrimeZ,
}

impl Conditioning {
    pub const ALL: [Conditioning; 4] = [Self::One, Self::X, Self::Z, Self::FPrimeZ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::One => "1",
            Self::X => "X_t",
            Self::Z => "Z_t",
            Self::FPrimeZ => "f'(Z_t)",
        }
    }

    fn value(&self, bundle: &PathBundle, f: &TestFunction, i: usize) -> f64 {
        match self {
            Self::One => 1.0,
            Self::X => bundle.x[i],
            Self::Z => bundle.z[i],
            Self::FPrimeZ => f.df(bundle.z[i]),
        }
    }
}

/// Lag between two grid indices `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Lag {
    pub start: usize,
    pub end: usize,
}

impl Lag {
    /// `(N/4, N/2), (N/2, 3N/4), (3N/4, N), (N/2, N)`.
    pub fn defaults(steps: usize) -> Vec<Lag> {
        let q = |k: usize| k * steps / 4;
        vec![
            Lag { start: q(1), end: q(2) },
            Lag { start: q(2), end: q(3) },
            Lag { start: q(3), end: steps },
            Lag { start: q(2), end: steps },
        ]
    }

    /// Lag `(t, t + h)` rounded to the grid.
    pub fn from_times(t: f64, h: f64, horizon: f64, steps: usize) -> Result<Lag> {
        let idx = |s: f64| (s / horizon * steps as f64).round();
        let (start, end) = (idx(t), idx(t + h));
        if !(start >= 0.0 && end <= steps as f64 && start < end) {
            return Err(invalid(format!("lag ({t}, {}) does not fit the grid", t + h)));
        }
        Ok(Lag {
            start: start as usize,
            end: end as usize,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MartingaleOptions {
    /// Lags in grid indices; empty means [`Lag::defaults`].
    pub lags: Vec<Lag>,
    pub statistics: Vec<Conditioning>,
    pub generator: Generator,
    pub min_paths: usize,
    /// Family-wise false-alarm probability before the floor of 4 applies.
    pub family_level: f64,
}

impl Default for MartingaleOptions {
    fn default() -> Self {
        Self {
            lags: Vec::new(),
            statistics: Conditioning::ALL.to_vec(),
            generator: Generator::default(),
            min_paths: 1000,
            family_level: 1e-3,
        }
    }
}

/// `max(4, Φ⁻¹(1 - level / (2m)))` for `m` simultaneous two-sided tests.
pub fn z_threshold(tests: usize, family_level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let per_test = family_level / (2.0 * tests.max(1) as f64);
    normal.inverse_cdf(1.0 - per_test).max(4.0)
}

/// One `(f, lag, statistic)` entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleEntry {
    pub f: String,
    pub lag: (f64, f64),
    pub statistic: String,
    pub mean: f64,
    pub stderr: f64,
    pub z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleTestReport {
    pub certifies: String,
    pub f: String,
    pub paths: u64,
    pub entries: Vec<MartingaleEntry>,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub qv_relative_error: Option<f64>,
    pub qv_passed: Option<bool>,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl MartingaleTestReport {
    /// Folds a quadratic-variation result into the pass decision.
    pub fn with_qv(mut self, qv: &QvReport) -> Self {
        self.qv_relative_error = Some(qv.median_relative_error);
        self.qv_passed = Some(qv.passed);
        self.passed = self.max_abs_z <= self.threshold && qv.passed;
        self
    }
}

impl Tabular for MartingaleTestReport {
    fn rows(&self) -> Vec<Measurement> {
        let mut rows: Vec<Measurement> = self
            .entries
            .iter()
            .map(|e| {
                Measurement::new(format!("z[{}; {}]", self.f, e.statistic), e.z)
                    .at(e.lag.1 - e.lag.0)
            })
            .collect();
        rows.push(Measurement::new(format!("max_abs_z[{}]", self.f), self.max_abs_z));
        if let Some(q) = self.qv_relative_error {
            rows.push(Measurement::new("qv_median_relative_error", q));
        }
        rows
    }
}

/// Streaming accumulator for [`martingale_test`].
#[derive(Clone)]
pub struct MartingaleAccumulator {
    mu: Coefficient,
    sigma: Coefficient,
    functions: Arc<Vec<TestFunction>>,
    lags: Arc<Vec<Lag>>,
    opts: Arc<MartingaleOptions>,
    /// Indexed `[function][lag][statistic]`.
    sums: Vec<Moments>,
    paths: u64,
    scratch: Vec<f64>,
}

impl MartingaleAccumulator {
    pub fn new(
        mu: &Coefficient,
        sigma: &Coefficient,
        functions: &[TestFunction],
        steps: usize,
        opts: &MartingaleOptions,
    ) -> Result<Self> {
        let lags = if opts.lags.is_empty() {
            Lag::defaults(steps)
        } else {
            opts.lags.clone()
        };
        if let Some(bad) = lags.iter().find(|l| !(l.start < l.end && l.end <= steps)) {
            return Err(invalid(format!("lag {bad:?} does not fit a grid of {steps} steps")));
        }
        if functions.is_empty() || opts.statistics.is_empty() {
            return Err(invalid("need at least one test function and one statistic"));
        }
        let cells = functions.len() * lags.len() * opts.statistics.len();
        Ok(Self {
            mu: mu.clone(),
            sigma: sigma.clone(),
            functions: Arc::new(functions.to_vec()),
            lags: Arc::new(lags),
            opts: Arc::new(opts.clone()),
            sums: vec![Moments::default(); cells],
            paths: 0,
            scratch: vec![0.0; steps + 1],
        })
    }

    /// A fresh accumulator with the same setup.
    pub fn empty(&self) -> Self {
        Self {
            sums: vec![Moments::default(); self.sums.len()],
            paths: 0,
            ..self.clone()
        }
    }

    pub fn reports(self) -> Result<Vec<MartingaleTestReport>> {
        if (self.paths as usize) < self.opts.min_paths {
            return Err(Error::InsufficientPaths {
                have: self.paths as usize,
                need: self.opts.min_paths,
            });
        }
        let stats = &self.opts.statistics;
        let tests = self.lags.len() * stats.len();
        let threshold = z_threshold(tests, self.opts.family_level);
        let n_steps = self.scratch.len() - 1;
        let mut reports = Vec::with_capacity(self.functions.len());
        for (fi, f) in self.functions.iter().enumerate() {
            let mut entries = Vec::with_capacity(tests);
            let mut max_abs_z = 0.0f64;
            for (li, lag) in self.lags.iter().enumerate() {
                for (si, g) in stats.iter().enumerate() {
                    let m = &self.sums[(fi * self.lags.len() + li) * stats.len() + si];
                    let (mean, stderr) = (m.mean(), m.stderr());
                    let z = if stderr > 0.0 {
                        mean / stderr
                    } else if mean == 0.0 {
                        0.0
                    } else {
                        mean.signum() * f64::INFINITY
                    };
                    max_abs_z = max_abs_z.max(z.abs());
                    entries.push(MartingaleEntry {
                        f: f.label().to_string(),
                        lag: (lag.start as f64 / n_steps as f64, lag.end as f64 / n_steps as f64),
                        statistic: g.name().to_string(),
                        mean,
                        stderr,
                        z,
                        passed: z.abs() <= threshold,
                    });
                }
            }
            reports.push(MartingaleTestReport {
                certifies: "local-martingale-property".into(),
                f: f.label().to_string(),
                paths: self.paths,
                entries,
                max_abs_z,
                threshold,
                qv_relative_error: None,
                qv_passed: None,
                passed: max_abs_z <= threshold,
                notes: vec![
                    "f has compact support, so the bounded process M^f is tested for the true martingale property".into(),
                    "lag endpoints are reported as fractions of the horizon".into(),
                ],
            });
        }
        Ok(reports)
    }
}

impl PathStatistic<PathBundle> for MartingaleAccumulator {
    type Output = Result<Vec<MartingaleTestReport>>;

    fn observe(&mut self, bundle: &PathBundle) {
        let (drift, vol) = coefficient_levels(bundle, &self.mu, &self.sigma);
        let stats = &self.opts.statistics;
        let nl = self.lags.len();
        let functions = Arc::clone(&self.functions);
        for (fi, f) in functions.iter().enumerate() {
            mf_from_levels(bundle, &drift, &vol, f, &self.opts.generator, &mut self.scratch);
            for (li, lag) in self.lags.iter().enumerate() {
                let increment = self.scratch[lag.end] - self.scratch[lag.start];
                for (si, g) in stats.iter().enumerate() {
                    self.sums[(fi * nl + li) * stats.len() + si].push(g.value(bundle, f, lag.start) * increment);
                }
            }
        }
        self.paths += 1;
    }

    fn merge(&mut self, later: Self) {
        for (s, l) in self.sums.iter_mut().zip(&later.sums) {
            s.merge(l);
        }
        self.paths += later.paths;
    }

    fn finish(self) -> Self::Output {
        self.reports()
    }
}

/// Studentized orthogonality test of `M^f` increments against adapted
/// statistics, one report per test function.
pub fn martingale_test(
    ensemble: &Ensemble,
    mu: &Coefficient,
    sigma: &Coefficient,
    functions: &[TestFunction],
    opts: &MartingaleOptions,
) -> Result<Vec<MartingaleTestReport>> {
    let mut acc = MartingaleAccumulator::new(mu, sigma, functions, ensemble.steps, opts)?;
    for b in &ensemble.bundles {
        acc.observe(b);
    }
    acc.reports()
}

/// Calibration constant `c` in the quadratic-variation tolerance `max(5%, c/√N)`.
///
/// For Brownian motion the relative error of the realized variation is
/// asymptotically `√(2/N) |G|` with `G` standard normal, whose median is
/// `0.954/√N`; `c` leaves roughly a 1.5× margin.
pub const QV_CONSTANT: f64 = 1.5;

pub fn qv_tolerance(steps: usize) -> f64 {
    0.05f64.max(QV_CONSTANT / (steps as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvReport {
    pub certifies: String,
    pub steps: usize,
    pub paths: usize,
    pub median_relative_error: f64,
    pub quantile_90_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Tabular for QvReport {
    fn rows(&self) -> Vec<Measurement> {
        let n = self.steps as f64;
        vec![
            Measurement::new("qv_median_relative_error", self.median_relative_error).at(n),
            Measurement::new("qv_q90_relative_error", self.quantile_90_relative_error).at(n),
        ]
    }
}

/// Per-path `|Σ(ΔM)² - Σσ²Δt| / Σσ²Δt` on the whole horizon; `0/0` counts as 0.
pub fn qv_relative_error(bundle: &PathBundle, sigma: &Coefficient) -> f64 {
    let dt = bundle.dt();
    let mut realized = 0.0;
    let mut integrated = 0.0;
    for j in 0..bundle.steps() {
        let dm = bundle.m[j + 1] - bundle.m[j];
        realized += dm * dm;
        let s = sigma.eval(bundle.grid[j], bundle.x[j]);
        integrated += s * s * dt;
    }
    if integrated == 0.0 {
        if realized == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (realized - integrated).abs() / integrated
    }
}

/// Streaming accumulator for [`qv_test`].
#[derive(Debug, Clone)]
pub struct QvAccumulator {
    sigma: Coefficient,
    steps: usize,
    errors: Vec<f64>,
}

impl QvAccumulator {
    pub fn new(sigma: &Coefficient, steps: usize) -> Self {
        Self {
            sigma: sigma.clone(),
            steps,
            errors: Vec::new(),
        }
    }

    pub fn empty(&self) -> Self {
        Self::new(&self.sigma, self.steps)
    }
}

impl PathStatistic<PathBundle> for QvAccumulator {
    type Output = QvReport;

    fn observe(&mut self, bundle: &PathBundle) {
        self.errors.push(qv_relative_error(bundle, &self.sigma));
    }

    fn merge(&mut self, later: Self) {
        self.errors.extend(later.errors);
    }

    fn finish(self) -> QvReport {
        qv_report(self.errors, self.steps)
    }
}

fn qv_report(mut errors: Vec<f64>, steps: usize) -> QvReport {
    errors.sort_by(f64::total_cmp);
    let med = if errors.is_empty() { f64::NAN } else { median(&errors) };
    let tolerance = qv_tolerance(steps);
    QvReport {
        certifies: "semimartingale-characteristics".into(),
        steps,
        paths: errors.len(),
        median_relative_error: med,
        quantile_90_relative_error: quantile_sorted(&errors, 0.9),
        tolerance,
        passed: med <= tolerance,
    }
}

/// Realized against integrated quadratic variation of `M`, median over paths.
pub fn qv_test(ensemble: &Ensemble, sigma: &Coefficient) -> QvReport {
    let errors = ensemble.bundles.iter().map(|b| qv_relative_error(b, sigma)).collect();
    qv_report(errors, ensemble.steps)
}

/// Flat summary used by the CLI when a martingale run is requested.
pub fn summarize(reports: &[MartingaleTestReport]) -> CheckReport {
    let mut out = CheckReport::new("local-martingale-property");
    for r in reports {
        out.measure(Measurement::new(format!("max_abs_z[{}]", r.f), r.max_abs_z));
        if !r.passed {
            out.fail(format!("{} fails with max |z| = {:.3}", r.f, r.max_abs_z));
        }
    }
    if let Some(r) = reports.first() {
        out.tolerances.insert("z_threshold".into(), r.threshold);
    }
    out.note(format!("battery of {} test functions; a finite battery only checks a necessary condition", reports.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Model, SimConfig, Simulator};
    use crate::kernels::KernelSpec;
    use approx::assert_relative_eq;

    fn sim(mu: Coefficient, sigma: Coefficient, steps: usize, paths: u64) -> Simulator {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        Simulator::new(SimConfig::new(1.0, steps, paths, 11), Model::new(mu, sigma, one.clone(), one)).unwrap()
    }

    #[test]
    fn generator_examples() {
        let quad = TestFunction::new("z^2", 10.0, |z| z * z, |z| 2.0 * z, |_| 2.0).unwrap();
        let one = Coefficient::constant(1.0).unwrap();
        let two = Coefficient::constant(2.0).unwrap();
        assert_eq!(generator(&one, &two, &quad, 0.1, 0.3, 1.5), 2.0 * 1.5 + 4.0);
        let zero = Coefficient::constant(0.0).unwrap();
        let mu = Coefficient::linear(0.5, 2.0).unwrap();
        assert_eq!(generator(&mu, &zero, &quad, 0.0, 1.0, 3.0), 2.5 * 6.0);
        let b = TestFunction::bump(0.0, 1.0).unwrap();
        assert_eq!(generator(&mu, &two, &b, 0.0, 1.0, 5.0), 0.0);
    }

    #[test]
    fn bump_is_valid() {
        for (c, h) in [(0.0, 1.0), (2.5, 0.3), (-1.0, 4.0)] {
            let b = TestFunction::bump(c, h).unwrap();
            let r = b.validate();
            assert!(r.passed, "{:?}", r.notes);
        }
        let bad = TestFunction::new("bad", 1.0, |z| z, |_| 1.0, |_| 1.0).unwrap();
        assert!(!bad.validate().passed);
    }

    #[test]
    fn zero_function_gives_zero_process() {
        let s = sim(Coefficient::constant(1.0).unwrap(), Coefficient::constant(1.0).unwrap(), 32, 1);
        let b = s.path(0).unwrap();
        let mf = compute_mf(&b, &s.model().mu, &s.model().sigma, &TestFunction::zero());
        assert!(mf.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn drift_only_process_is_nearly_constant() {
        // Z_t = t, so M^f_t = f(t) - Σ f'(t_j)Δt stays at f(0) up to O(Δt)
        let s = sim(Coefficient::constant(1.0).unwrap(), Coefficient::constant(0.0).unwrap(), 512, 1);
        let b = s.path(0).unwrap();
        let f = TestFunction::bump(0.5, 0.8).unwrap();
        let mf = compute_mf(&b, &s.model().mu, &s.model().sigma, &f);
        let f0 = f.f(0.0);
        let worst = mf.iter().map(|v| (v - f0).abs()).fold(0.0, f64::max);
        assert!(worst < 10.0 / 512.0, "{worst}");
    }

    #[test]
    fn degenerate_model_gives_zero_scores() {
        let zero = Coefficient::constant(0.0).unwrap();
        let ens = sim(zero.clone(), zero.clone(), 16, 1000).simulate().unwrap();
        let battery = TestFunction::default_battery(-1.0, 1.0).unwrap();
        let reports = martingale_test(&ens, &zero, &zero, &battery, &MartingaleOptions::default()).unwrap();
        assert_eq!(reports.len(), 6);
        for r in reports {
            assert!(r.passed);
            assert!(r.entries.iter().all(|e| e.z == 0.0));
        }
        let qv = qv_test(&ens, &zero);
        assert!(qv.passed && qv.median_relative_error == 0.0);
    }

    #[test]
    fn too_few_paths_is_an_error() {
        let one = Coefficient::constant(1.0).unwrap();
        let ens = sim(one.clone(), one.clone(), 16, 10).simulate().unwrap();
        let err = martingale_test(&ens, &one, &one, &[TestFunction::bump(0.0, 1.0).unwrap()], &Default::default());
        assert_eq!(err.unwrap_err(), Error::InsufficientPaths { have: 10, need: 1000 });
    }

    #[test]
    fn threshold_is_at_least_four() {
        assert_eq!(z_threshold(1, 1e-3), 4.0);
        let wide = z_threshold(1000, 1e-3);
        assert!(wide > 4.0 && wide < 5.0);
    }

    #[test]
    fn qv_of_brownian_motion_is_close_to_one() {
        let one = Coefficient::constant(1.0).unwrap();
        let ens = sim(Coefficient::constant(0.0).unwrap(), one.clone(), 1024, 200).simulate().unwrap();
        let qv = qv_test(&ens, &one);
        assert!(qv.passed, "{qv:?}");
        assert_relative_eq!(qv.tolerance, 0.05);
    }
}
