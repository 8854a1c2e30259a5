//! Volterra kernels on the triangle `{0 <= s <= t <= T}`.
//!
//! A [`KernelSpec`] is either of convolution form, `K(s,t) = K̃(t - s)`, or a
//! general two-argument function. Kernels may be singular on the diagonal;
//! such kernels refuse evaluation at `s = t` and are integrated over grid
//! cells with [`KernelSpec::cell_integral`], which uses exact antiderivatives
//! for pure power laws and graded quadrature otherwise.
//!
//! The `check_*` functions turn the integrability, regularity and structure
//! hypotheses of the existence theory into grid certificates.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, integrate_graded, QuadratureOptions};
use crate::report::{CheckReport, Measurement, Tabular};
use crate::stats::{log_log_fit, PiecewiseLinear};

pub type Profile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Bivariate = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Relative slack on the horizon when validating `t <= T`.
const HORIZON_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KernelForm {
    General,
    Convolution,
}

#[derive(Clone)]
enum Shape {
    Constant(f64),
    /// `coef * u^{-alpha}` exactly.
    PowerLaw {
        coef: f64,
        alpha: f64,
    },
    Profile(Profile),
    General(Bivariate),
}

#[derive(Clone)]
pub struct KernelSpec {
    name: String,
    shape: Shape,
    singularity: f64,
    partial1: Option<Bivariate>,
    bound: Option<f64>,
    horizon: f64,
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelSpec")
            .field("name", &self.name)
            .field("form", &self.form())
            .field("singularity", &self.singularity)
            .field("partial1", &self.partial1.is_some())
            .field("bound", &self.bound)
            .field("horizon", &self.horizon)
            .finish()
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon.is_finite() && horizon > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("horizon must be positive, got {horizon}")))
    }
}

impl KernelSpec {
    /// `K ≡ c`.
    pub fn constant(c: f64, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if !c.is_finite() {
            return Err(invalid("constant kernel value must be finite"));
        }
        Ok(Self {
            name: format!("constant{{c={c}}}"),
            shape: Shape::Constant(c),
            singularity: 0.0,
            partial1: Some(Arc::new(|_, _| 0.0)),
            bound: Some(c.abs()),
            horizon,
        })
    }

    /// `K(s,t) = (t - s)^{-alpha}` for `alpha ∈ [0, 1)`.
    pub fn fractional(alpha: f64, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if !(0.0..1.0).contains(&alpha) {
            return Err(invalid(format!("fractional alpha must lie in [0, 1), got {alpha}")));
        }
        if alpha == 0.0 {
            let mut k = Self::constant(1.0, horizon)?;
            k.name = "fractional{alpha=0}".into();
            return Ok(k);
        }
        Ok(Self {
            name: format!("fractional{{alpha={alpha}}}"),
            shape: Shape::PowerLaw { coef: 1.0, alpha },
            singularity: alpha,
            partial1: None,
            bound: None,
            horizon,
        })
    }

    /// `K(s,t) = exp(-lambda (t - s))`.
    pub fn exponential(lambda: f64, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if !lambda.is_finite() {
            return Err(invalid("exponential rate must be finite"));
        }
        let bound = if lambda >= 0.0 { 1.0 } else { (-lambda * horizon).exp() };
        Ok(Self {
            name: format!("exponential{{lambda={lambda}}}"),
            shape: Shape::Profile(Arc::new(move |u: f64| (-lambda * u).exp())),
            singularity: 0.0,
            partial1: Some(Arc::new(move |s: f64, t: f64| lambda * (-lambda * (t - s)).exp())),
            bound: Some(bound),
            horizon,
        })
    }

    /// Convolution kernel with a piecewise-linear profile through
    /// `(knots[i], values[i])`, held flat outside the knot range.
    pub fn lipschitz_profile(knots: &[f64], values: &[f64], horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if knots.len() != values.len() || knots.is_empty() {
            return Err(invalid("profile table needs equally many knots and values"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("profile knots must be strictly increasing"));
        }
        if values.iter().chain(knots).any(|v| !v.is_finite()) {
            return Err(invalid("profile table entries must be finite"));
        }
        let table = Arc::new(PiecewiseLinear::new(knots.to_vec(), values.to_vec()));
        let bound = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let for_profile = Arc::clone(&table);
        let for_derivative = Arc::clone(&table);
        Ok(Self {
            name: format!("lipschitz_profile{{knots={}}}", knots.len()),
            shape: Shape::Profile(Arc::new(move |u| for_profile.value(u))),
            singularity: 0.0,
            // d/ds K̃(t - s) = -K̃'(t - s)
            partial1: Some(Arc::new(move |s, t| -for_derivative.slope(t - s))),
            bound: Some(bound),
            horizon,
        })
    }

    /// Convolution kernel from an arbitrary profile `u ↦ K̃(u)` on `(0, T]`.
    pub fn convolution(
        name: impl Into<String>,
        horizon: f64,
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_horizon(horizon)?;
        Ok(Self {
            name: name.into(),
            shape: Shape::Profile(Arc::new(profile)),
            singularity: 0.0,
            partial1: None,
            bound: None,
            horizon,
        })
    }

    /// General kernel `(s, t) ↦ K(s, t)`.
    pub fn general(
        name: impl Into<String>,
        horizon: f64,
        kernel: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_horizon(horizon)?;
        Ok(Self {
            name: name.into(),
            shape: Shape::General(Arc::new(kernel)),
            singularity: 0.0,
            partial1: None,
            bound: None,
            horizon,
        })
    }

    /// Declares `K(s,t) ~ c (t - s)^{-alpha}` near the diagonal.
    pub fn with_singularity(mut self, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(invalid(format!("singularity exponent must lie in [0, 1), got {alpha}")));
        }
        if matches!(self.shape, Shape::Constant(_)) && alpha > 0.0 {
            return Err(invalid("a constant kernel cannot be singular"));
        }
        self.singularity = alpha;
        Ok(self)
    }

    /// Declares `K(·, t)` absolutely continuous with derivative `∂₁K`.
    pub fn with_partial1(mut self, d1: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.partial1 = Some(Arc::new(d1));
        self
    }

    /// Declares `sup |K| <= bound` on the triangle.
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound.abs());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn form(&self) -> KernelForm {
        match self.shape {
            Shape::General(_) => KernelForm::General,
            _ => KernelForm::Convolution,
        }
    }

    pub fn singularity_exponent(&self) -> f64 {
        self.singularity
    }

    pub fn is_singular(&self) -> bool {
        self.singularity > 0.0
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn has_partial1(&self) -> bool {
        self.partial1.is_some()
    }

    /// `Some(c)` when `K ≡ c`.
    pub fn constant_value(&self) -> Option<f64> {
        match self.shape {
            Shape::Constant(c) => Some(c),
            _ => None,
        }
    }

    /// `Some((c, alpha))` when the profile is exactly `c u^{-alpha}`.
    pub fn power_law(&self) -> Option<(f64, f64)> {
        match self.shape {
            Shape::PowerLaw { coef, alpha } => Some((coef, alpha)),
            _ => None,
        }
    }

    /// Profile value `K̃(u)` for convolution kernels, `None` otherwise.
    pub fn profile(&self, u: f64) -> Option<f64> {
        match &self.shape {
            Shape::Constant(c) => Some(*c),
            Shape::PowerLaw { coef, alpha } => Some(coef * u.powf(-alpha)),
            Shape::Profile(p) => Some(p(u)),
            Shape::General(_) => None,
        }
    }

    /// Raw two-argument evaluation without domain checks.
    pub fn general_eval(&self, s: f64, t: f64) -> f64 {
        match &self.shape {
            Shape::General(k) => k(s, t),
            _ => self.profile(t - s).expect("convolution kernel has a profile"),
        }
    }

    fn check_domain(&self, s: f64, t: f64) -> Result<()> {
        let inside = s.is_finite()
            && t.is_finite()
            && s >= 0.0
            && s <= t
            && t <= self.horizon * (1.0 + HORIZON_SLACK);
        if inside {
            Ok(())
        } else {
            Err(Error::Domain {
                s,
                t,
                horizon: self.horizon,
            })
        }
    }

    /// `K(s, t)` on the triangle; errors on the diagonal of a singular kernel.
    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        self.check_domain(s, t)?;
        if s == t && self.is_singular() {
            return Err(Error::Singularity {
                kernel: self.name.clone(),
                t,
            });
        }
        Ok(self.general_eval(s, t))
    }

    /// `∂₁K(s, t)` when declared.
    pub fn partial1(&self, s: f64, t: f64) -> Result<f64> {
        self.check_domain(s, t)?;
        match &self.partial1 {
            Some(d) => Ok(d(s, t)),
            None => Err(Error::MissingDerivative {
                kernel: self.name.clone(),
            }),
        }
    }

    /// `K(t - u, t)`, evaluated through the gap so that tiny `u` stays
    /// accurate for convolution kernels.
    pub(crate) fn gap_eval(&self, u: f64, t: f64) -> f64 {
        match &self.shape {
            Shape::General(k) => {
                let mut s = t - u;
                if s >= t {
                    s = t.next_down();
                }
                k(s.max(0.0), t)
            }
            _ => self.profile(u).expect("convolution kernel has a profile"),
        }
    }

    fn divergence(&self, power: f64) -> Option<Error> {
        let exponent = self.singularity * power;
        (self.is_singular() && exponent >= 1.0).then(|| Error::DivergentIntegral {
            kernel: self.name.clone(),
            power,
            exponent,
        })
    }

    /// `∫_{near}^{far} K̃(u) du` for convolution kernels.
    pub(crate) fn gap_integral(&self, near: f64, far: f64, opts: &QuadratureOptions) -> Result<f64> {
        match &self.shape {
            Shape::Constant(c) => Ok(c * (far - near)),
            Shape::PowerLaw { coef, alpha } => Ok(power_law_integral(*coef, *alpha, near, far)),
            Shape::Profile(p) => integrate_graded(near, far, self.singularity, |u| p(u), opts),
            Shape::General(_) => Err(Error::NotConvolution {
                kernel: self.name.clone(),
            }),
        }
    }

    /// `∫_a^b K(s, t) ds` for `0 <= a < b <= t <= T`.
    pub fn cell_integral(&self, a: f64, b: f64, t: f64) -> Result<f64> {
        self.cell_integral_with(a, b, t, &QuadratureOptions::default())
    }

    pub fn cell_integral_with(&self, a: f64, b: f64, t: f64, opts: &QuadratureOptions) -> Result<f64> {
        self.check_domain(a, t)?;
        self.check_domain(b, t)?;
        if a >= b {
            return Err(invalid(format!("cell [{a}, {b}] is empty")));
        }
        match &self.shape {
            Shape::Constant(c) => Ok(c * (b - a)),
            Shape::General(_) => {
                integrate_graded(t - b, t - a, self.singularity, |u| self.gap_eval(u, t), opts)
            }
            _ => self.gap_integral(t - b, t - a, opts),
        }
    }

    /// `(∫_0^t |K(s,t)|^q ds)^{1/q}` by graded quadrature.
    pub fn lq_norm(&self, t: f64, q: f64) -> Result<f64> {
        self.lq_norm_with(t, q, &QuadratureOptions::default())
    }

    pub fn lq_norm_with(&self, t: f64, q: f64, opts: &QuadratureOptions) -> Result<f64> {
        if !(q >= 1.0 && q.is_finite()) {
            return Err(invalid(format!("norm exponent must be >= 1, got {q}")));
        }
        if !(t > 0.0) {
            return Err(Error::Domain {
                s: 0.0,
                t,
                horizon: self.horizon,
            });
        }
        self.check_domain(0.0, t)?;
        if let Some(err) = self.divergence(q) {
            return Err(err);
        }
        let integral = integrate_graded(
            0.0,
            t,
            self.singularity * q,
            |u| self.gap_eval(u, t).abs().powf(q),
            opts,
        )?;
        Ok(integral.powf(1.0 / q))
    }

    /// Grid certificate for the three type invariants: convolution
    /// consistency, absolute continuity through `∂₁K`, and the declared bound.
    pub fn verify_invariants(&self, points: usize) -> CheckReport {
        let mut report = CheckReport::new("kernel-invariants");
        report.tolerances.insert("absolute_continuity".into(), AC_TOLERANCE);
        let points = points.max(2);
        let mut worst_conv = 0.0f64;
        let mut worst_ac = 0.0f64;
        let mut worst_bound = 0.0f64;
        for it in 1..=points {
            let t = self.horizon * it as f64 / points as f64;
            for is in 0..points {
                let s = t * is as f64 / points as f64;
                let value = self.general_eval(s, t);
                if let Some(p) = self.profile(t - s) {
                    worst_conv = worst_conv.max((value - p).abs());
                }
                if let Some(b) = self.bound {
                    worst_bound = worst_bound.max(value.abs() / b.max(f64::MIN_POSITIVE));
                }
            }
            if self.partial1.is_some() {
                for is in 1..=points {
                    let s = t * is as f64 / points as f64;
                    match self.absolute_continuity_gap(s, t) {
                        Ok(gap) => worst_ac = worst_ac.max(gap),
                        Err(e) => {
                            report.fail(format!("absolute continuity at ({s}, {t}): {e}"));
                        }
                    }
                }
            }
        }
        report.measure(Measurement::new("convolution_mismatch", worst_conv));
        if worst_conv != 0.0 {
            report.fail("general evaluation disagrees with the profile");
        }
        if self.partial1.is_some() {
            report.measure(Measurement::new("absolute_continuity_gap", worst_ac));
            if worst_ac > AC_TOLERANCE {
                report.fail("K(s,t) - K(0,t) differs from the integral of its derivative");
            }
        }
        if self.bound.is_some() {
            report.measure(Measurement::new("bound_ratio", worst_bound));
            if worst_bound > 1.0 {
                report.fail("kernel exceeds its declared bound");
            }
        }
        report
    }

    /// `|K(s,t) - K(0,t) - ∫_0^s ∂₁K(u,t) du| / (1 + |K(s,t) - K(0,t)|)`.
    fn absolute_continuity_gap(&self, s: f64, t: f64) -> Result<f64> {
        let d1 = self.partial1.as_ref().ok_or_else(|| Error::MissingDerivative {
            kernel: self.name.clone(),
        })?;
        let lhs = self.general_eval(s, t) - self.general_eval(0.0, t);
        let (rhs, _) = integrate(|u| d1(u, t), 0.0, s, &QuadratureOptions::default())?;
        Ok((lhs - rhs).abs() / (1.0 + lhs.abs()))
    }
}

const AC_TOLERANCE: f64 = 1e-7;

/// `∫_{near}^{far} c u^{-alpha} du`, written to avoid cancellation when the
/// two endpoints are close.
fn power_law_integral(coef: f64, alpha: f64, near: f64, far: f64) -> f64 {
    let beta = 1.0 - alpha;
    if near == 0.0 {
        coef * far.powf(beta) / beta
    } else {
        coef * near.powf(beta) * (beta * (far / near).ln()).exp_m1() / beta
    }
}

/// Grid certificate for one kernel hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheckReport {
    pub certifies: String,
    pub passed: bool,
    /// Largest measured quantity divided by its claimed bound.
    pub worst_ratio: f64,
    /// `(t, t')` pair attaining `worst_ratio`.
    pub witness: Option<(f64, f64)>,
    pub grid: GridMeta,
    pub tolerance: f64,
    /// Fitted constant (`C_p` or the uniform `L¹` bound), when one is fitted.
    pub fitted_constant: Option<f64>,
    /// Structural branches that hold (`"bounded_ac"`, `"convolution_l2"`).
    pub branches: Vec<String>,
    pub measurements: Vec<Measurement>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridMeta {
    pub points: usize,
    pub dyadic_scales: usize,
    pub min_gap: f64,
    pub max_gap: f64,
}

impl KernelCheckReport {
    fn new(certifies: &str, grid: GridMeta) -> Self {
        Self {
            certifies: certifies.into(),
            passed: true,
            worst_ratio: 0.0,
            witness: None,
            grid,
            tolerance: REPORT_TOLERANCE,
            fitted_constant: None,
            branches: Vec::new(),
            measurements: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn fail(&mut self, note: impl Into<String>) {
        self.passed = false;
        self.worst_ratio = f64::INFINITY;
        self.notes.push(note.into());
    }

    pub fn value(&self, quantity: &str) -> Option<f64> {
        self.measurements
            .iter()
            .find(|m| m.quantity == quantity)
            .map(|m| m.value)
    }
}

impl Tabular for KernelCheckReport {
    fn rows(&self) -> Vec<Measurement> {
        let mut rows = self.measurements.clone();
        rows.push(Measurement::new("worst_ratio", self.worst_ratio));
        if let Some(c) = self.fitted_constant {
            rows.push(Measurement::new("fitted_constant", c));
        }
        rows
    }
}

const REPORT_TOLERANCE: f64 = 1e-9;

/// Minimum number of dyadic gap scales before a regularity pass is declared.
pub const MIN_DYADIC_SCALES: usize = 8;

/// Slack allowed between the measured and required log-log slopes.
pub const SLOPE_TOLERANCE: f64 = 0.02;

fn grid_meta(times: &[f64]) -> GridMeta {
    GridMeta {
        points: times.len(),
        dyadic_scales: 0,
        min_gap: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_gap: times.iter().copied().fold(0.0, f64::max),
    }
}

/// `Δ_T`-integrability: `K_μ(·,t) ∈ L¹` and `K_σ(·,t) ∈ L²` at every grid time.
pub fn check_base_integrability(
    k_mu: &KernelSpec,
    k_sigma: &KernelSpec,
    grid: &[f64],
) -> Result<KernelCheckReport> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
        return Err(invalid("integrability grid must be a nonempty subset of (0, T]"));
    }
    let mut report = KernelCheckReport::new("kernel-integrability", grid_meta(grid));
    let mut max_mu = 0.0f64;
    let mut max_sigma = 0.0f64;
    for &t in grid {
        match k_mu.lq_norm(t, 1.0) {
            Ok(v) => max_mu = max_mu.max(v),
            Err(Error::DivergentIntegral { .. }) => {
                report.fail(format!("K_mu(·,{t}) is not in L¹"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    for &t in grid {
        match k_sigma.lq_norm(t, 2.0) {
            Ok(v) => max_sigma = max_sigma.max(v),
            Err(Error::DivergentIntegral { .. }) => {
                report.fail(format!("K_sigma(·,{t}) is not in L²"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if report.passed {
        report.measurements.push(Measurement::new("max_l1_norm_k_mu", max_mu));
        report.measurements.push(Measurement::new("max_l2_norm_k_sigma", max_sigma));
    }
    Ok(report)
}

/// Exponent pair `(p, γ)` with optional constant `C_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityParams {
    pub p: f64,
    pub gamma: f64,
    pub c_p: Option<f64>,
}

impl RegularityParams {
    pub fn new(p: f64, gamma: f64) -> Result<Self> {
        if !(p > 4.0 && p.is_finite()) {
            return Err(invalid(format!("p must exceed 4, got {p}")));
        }
        if !(gamma > 2.0 / p && gamma < 0.5) {
            return Err(invalid(format!(
                "gamma must lie in (2/p, 1/2) = ({}, 0.5), got {gamma}",
                2.0 / p
            )));
        }
        Ok(Self { p, gamma, c_p: None })
    }

    pub fn with_constant(mut self, c_p: f64) -> Self {
        self.c_p = Some(c_p);
        self
    }

    /// `γ = 1/2 - α - 1/p`, the admissible choice for a fractional kernel.
    pub fn fractional_admissible(alpha: f64, p: f64) -> Result<Self> {
        Self::new(p, 0.5 - alpha - 1.0 / p)
    }

    /// Integrability power for the drift kernel, `p / (p - 1)`.
    pub fn drift_power(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// Integrability power for the diffusion kernel, `2p / (p - 2)`.
    pub fn diffusion_power(&self) -> f64 {
        2.0 * self.p / (self.p - 2.0)
    }

    /// Required exponent of `|t' - t|` for the drift kernel.
    pub fn drift_exponent(&self) -> f64 {
        self.gamma * self.p / (self.p - 1.0)
    }

    /// Required exponent of `|t' - t|` for the diffusion kernel.
    pub fn diffusion_exponent(&self) -> f64 {
        2.0 * self.gamma * self.p / (self.p - 2.0)
    }
}

/// Pairs `(t, t + T 2^{-k})` for each anchor `t` and `k ∈ scales`, kept inside `[0, T]`.
pub fn dyadic_pairs(horizon: f64, anchors: &[f64], scales: std::ops::RangeInclusive<u32>) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for &t in anchors {
        for k in scales.clone() {
            let h = horizon * 0.5f64.powi(k as i32);
            if t + h <= horizon * (1.0 + HORIZON_SLACK) {
                pairs.push((t, (t + h).min(horizon)));
            }
        }
    }
    pairs
}

/// Number of distinct dyadic scales `round(log2 |t' - t|)` among the pairs.
pub fn dyadic_scale_count(pairs: &[(f64, f64)]) -> usize {
    pairs
        .iter()
        .filter(|(t, tp)| tp > t)
        .map(|(t, tp)| (tp - t).log2().round() as i64)
        .collect::<BTreeSet<_>>()
        .len()
}

/// The two summands of the regularity bound for one kernel at one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularitySummands {
    /// `∫_0^t |K(s,t') - K(s,t)|^q ds`
    pub increment: f64,
    /// `∫_t^{t'} |K(s,t')|^q ds`
    pub tail: f64,
}

impl RegularitySummands {
    pub fn total(&self) -> f64 {
        self.increment + self.tail
    }
}

/// Evaluates both summands for `kernel` at `(t, t')` with power `q`.
pub fn regularity_summands(kernel: &KernelSpec, t: f64, t_prime: f64, q: f64) -> Result<RegularitySummands> {
    kernel.check_domain(t, t_prime)?;
    if t_prime <= t {
        return Err(invalid(format!("need t < t', got ({t}, {t_prime})")));
    }
    if let Some(err) = kernel.divergence(q) {
        return Err(err);
    }
    let opts = QuadratureOptions::default();
    let exponent = kernel.singularity * q;
    let h = t_prime - t;
    let increment = if kernel.constant_value().is_some() || t == 0.0 {
        0.0
    } else {
        integrate_graded(
            0.0,
            t,
            exponent,
            |u| match kernel.form() {
                KernelForm::Convolution => {
                    (kernel.gap_eval(u + h, t_prime) - kernel.gap_eval(u, t)).abs().powf(q)
                }
                KernelForm::General => {
                    let mut s = t - u;
                    if s >= t {
                        s = t.next_down();
                    }
                    let s = s.max(0.0);
                    (kernel.general_eval(s, t_prime) - kernel.general_eval(s, t)).abs().powf(q)
                }
            },
            &opts,
        )?
    };
    let tail = integrate_graded(0.0, h, exponent, |u| kernel.gap_eval(u, t_prime).abs().powf(q), &opts)?;
    Ok(RegularitySummands { increment, tail })
}

struct FamilyFit {
    ratios: Vec<f64>,
    slope_total: f64,
    slope_increment: f64,
    slope_tail: f64,
}

fn fit_family(gaps: &[f64], summands: &[RegularitySummands], exponent: f64) -> FamilyFit {
    let totals: Vec<f64> = summands.iter().map(RegularitySummands::total).collect();
    let incs: Vec<f64> = summands.iter().map(|s| s.increment).collect();
    let tails: Vec<f64> = summands.iter().map(|s| s.tail).collect();
    // An identically vanishing summand cannot blow up.
    let slope = |ys: &[f64]| log_log_fit(gaps, ys).map_or(f64::INFINITY, |f| f.slope);
    FamilyFit {
        ratios: totals
            .iter()
            .zip(gaps)
            .map(|(v, h)| v / h.powf(exponent))
            .collect(),
        slope_total: slope(&totals),
        slope_increment: slope(&incs),
        slope_tail: slope(&tails),
    }
}

/// Kernel regularity certificate: both summands of the increment bound, for
/// both kernels, measured on `pairs` and compared with `C_p |t'-t|^{exponent}`.
pub fn check_regularity(
    k_mu: &KernelSpec,
    k_sigma: &KernelSpec,
    params: &RegularityParams,
    pairs: &[(f64, f64)],
) -> Result<KernelCheckReport> {
    let params = RegularityParams::new(params.p, params.gamma).map(|p| RegularityParams {
        c_p: params.c_p,
        ..p
    })?;
    let scales = dyadic_scale_count(pairs);
    if scales < MIN_DYADIC_SCALES {
        return Err(Error::GridTooCoarse {
            found: scales,
            required: MIN_DYADIC_SCALES,
        });
    }
    let gaps: Vec<f64> = pairs.iter().map(|(t, tp)| tp - t).collect();
    let mut report = KernelCheckReport::new(
        "kernel-regularity",
        GridMeta {
            points: pairs.len(),
            dyadic_scales: scales,
            min_gap: gaps.iter().copied().fold(f64::INFINITY, f64::min),
            max_gap: gaps.iter().copied().fold(0.0, f64::max),
        },
    );
    report.measurements.push(Measurement::new("required_exponent_mu", params.drift_exponent()));
    report
        .measurements
        .push(Measurement::new("required_exponent_sigma", params.diffusion_exponent()));

    let families = [
        ("mu", k_mu, params.drift_power(), params.drift_exponent()),
        ("sigma", k_sigma, params.diffusion_power(), params.diffusion_exponent()),
    ];
    let mut worst: Option<(f64, (f64, f64))> = None;
    let mut slopes_ok = true;
    for (label, kernel, power, exponent) in families {
        let mut summands = Vec::with_capacity(pairs.len());
        for &(t, tp) in pairs {
            match regularity_summands(kernel, t, tp, power) {
                Ok(s) => summands.push(s),
                Err(Error::DivergentIntegral { .. }) => {
                    report.fail(format!(
                        "|K_{label}|^{power:.4} is not integrable near the diagonal (alpha = {})",
                        kernel.singularity_exponent()
                    ));
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
        }
        let fit = fit_family(&gaps, &summands, exponent);
        for (i, r) in fit.ratios.iter().enumerate() {
            if worst.map_or(true, |(w, _)| *r > w) {
                worst = Some((*r, pairs[i]));
            }
        }
        for (name, slope) in [
            ("total", fit.slope_total),
            ("increment", fit.slope_increment),
            ("tail", fit.slope_tail),
        ] {
            if slope.is_finite() {
                report
                    .measurements
                    .push(Measurement::new(format!("slope_{name}_{label}"), slope));
            }
        }
        if fit.slope_total < exponent - SLOPE_TOLERANCE {
            slopes_ok = false;
            report.notes.push(format!(
                "K_{label}: measured slope {:.4} below required {:.4}; ratio blows up as the gap shrinks",
                fit.slope_total, exponent
            ));
        }
    }
    let (sup_ratio, witness) = worst.expect("at least one pair");
    report.witness = Some(witness);
    report.measurements.push(Measurement::new("sup_ratio", sup_ratio));
    match params.c_p {
        Some(c) => {
            report.worst_ratio = sup_ratio / c;
            if report.worst_ratio > 1.0 + report.tolerance {
                report.passed = false;
                report.notes.push(format!("supplied C_p = {c} is exceeded (sup ratio {sup_ratio})"));
            }
        }
        None => {
            report.fitted_constant = Some(sup_ratio);
            report.worst_ratio = 1.0;
        }
    }
    if !slopes_ok {
        report.passed = false;
        report.worst_ratio = f64::INFINITY;
    }
    Ok(report)
}

/// Which structural branch of the diffusion kernel the caller asserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StructuralClaim {
    /// Test whichever branches the kernel's declared metadata allows.
    Detect,
    /// Bounded and absolutely continuous in `s`; needs `∂₁K`.
    BoundedAbsolutelyContinuous,
    /// Convolution with an `L²` profile.
    ConvolutionL2,
}

const STRUCTURAL_GRID: usize = 32;

/// Structural certificate: uniform `L¹` bound for `K_μ`; for `K_σ` either
/// (i) bounded and absolutely continuous with `sup_t ‖∂₁K_σ(·,t)‖_p < ∞`
/// or (ii) convolution form with profile in `L²([0,T])`.
pub fn check_structural(
    k_mu: &KernelSpec,
    k_sigma: &KernelSpec,
    p_struct: f64,
    claim: StructuralClaim,
) -> Result<KernelCheckReport> {
    if !(p_struct > 1.0 && p_struct.is_finite()) {
        return Err(invalid(format!("structural exponent must exceed 1, got {p_struct}")));
    }
    if claim == StructuralClaim::BoundedAbsolutelyContinuous && !k_sigma.has_partial1() {
        return Err(Error::MissingDerivative {
            kernel: k_sigma.name().to_string(),
        });
    }
    let horizon = k_sigma.horizon().min(k_mu.horizon());
    let grid: Vec<f64> = (1..=STRUCTURAL_GRID)
        .map(|k| horizon * k as f64 / STRUCTURAL_GRID as f64)
        .collect();
    let mut report = KernelCheckReport::new("kernel-structure", grid_meta(&grid));

    let mut sup_l1 = 0.0f64;
    for &t in &grid {
        match k_mu.lq_norm(t, 1.0) {
            Ok(v) => sup_l1 = sup_l1.max(v),
            Err(Error::DivergentIntegral { .. }) => {
                report.fail("K_mu is not uniformly bounded in L¹");
                return Ok(report);
            }
            Err(e) => return Err(e),
        }
    }
    report.fitted_constant = Some(sup_l1);
    report.measurements.push(Measurement::new("sup_l1_norm_k_mu", sup_l1));

    let try_bounded = match claim {
        StructuralClaim::Detect => k_sigma.bound().is_some() && k_sigma.has_partial1(),
        StructuralClaim::BoundedAbsolutelyContinuous => true,
        StructuralClaim::ConvolutionL2 => false,
    };
    let try_convolution = match claim {
        StructuralClaim::Detect | StructuralClaim::ConvolutionL2 => true,
        StructuralClaim::BoundedAbsolutelyContinuous => false,
    };

    if try_bounded {
        match bounded_branch(k_sigma, p_struct, &grid) {
            Ok(norm) => {
                report.branches.push("bounded_ac".into());
                report
                    .measurements
                    .push(Measurement::new("sup_lp_norm_partial1_k_sigma", norm));
            }
            Err(why) => report.notes.push(format!("bounded branch fails: {why}")),
        }
    }
    if try_convolution {
        if k_sigma.form() != KernelForm::Convolution {
            report.notes.push("convolution branch fails: K_sigma is of general form".into());
        } else {
            match k_sigma.lq_norm(horizon, 2.0) {
                Ok(norm) => {
                    report.branches.push("convolution_l2".into());
                    report.measurements.push(Measurement::new("l2_norm_profile", norm));
                }
                Err(Error::DivergentIntegral { .. }) => {
                    report.notes.push("convolution branch fails: profile is not in L²".into());
                }
                Err(e) => return Err(e),
            }
        }
    }
    if report.branches.is_empty() {
        report.fail("K_sigma satisfies neither structural branch");
    }
    Ok(report)
}

fn bounded_branch(kernel: &KernelSpec, p: f64, grid: &[f64]) -> std::result::Result<f64, String> {
    let bound = kernel.bound().ok_or("no bound declared")?;
    if kernel.is_singular() {
        return Err("kernel is singular on the diagonal".into());
    }
    let d1 = kernel.partial1.as_ref().ok_or("no first-argument derivative")?;
    let mut sup_norm = 0.0f64;
    for &t in grid {
        for m in 0..=16 {
            let s = t * m as f64 / 16.0;
            let v = kernel.general_eval(s, t);
            if !(v.abs() <= bound * (1.0 + REPORT_TOLERANCE)) {
                return Err(format!("|K({s}, {t})| = {} exceeds bound {bound}", v.abs()));
            }
            if m > 0 {
                let gap = kernel.absolute_continuity_gap(s, t).map_err(|e| e.to_string())?;
                if gap > AC_TOLERANCE {
                    return Err(format!("absolute continuity fails at ({s}, {t}) by {gap:e}"));
                }
            }
        }
        let (integral, _) = integrate(|u| d1(u, t).abs().powf(p), 0.0, t, &QuadratureOptions::default())
            .map_err(|e| e.to_string())?;
        let norm = integral.powf(1.0 / p);
        if !norm.is_finite() {
            return Err(format!("derivative norm is infinite at t = {t}"));
        }
        sup_norm = sup_norm.max(norm);
    }
    Ok(sup_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eval_examples() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        assert_eq!(one.eval(0.3, 0.7).unwrap(), 1.0);
        let frac = KernelSpec::fractional(0.25, 1.0).unwrap();
        assert_eq!(frac.eval(0.0, 1.0).unwrap(), 1.0);
        let half = KernelSpec::fractional(0.5, 1.0).unwrap();
        assert!(matches!(half.eval(0.4, 0.4), Err(Error::Singularity { .. })));
    }

    #[test]
    fn eval_rejects_points_off_the_triangle() {
        let k = KernelSpec::constant(1.0, 1.0).unwrap();
        for (s, t) in [(0.5, 0.4), (-0.1, 0.5), (0.2, 1.5), (f64::NAN, 0.5)] {
            assert!(matches!(k.eval(s, t), Err(Error::Domain { .. })), "({s}, {t})");
        }
        // regular kernels may be evaluated on the diagonal
        assert_eq!(k.eval(0.5, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn cell_integral_examples() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        assert_eq!(one.cell_integral(0.0, 1.0, 1.0).unwrap(), 1.0);
        let frac = KernelSpec::fractional(0.25, 1.0).unwrap();
        // antiderivative oracle: (4/3)(1 - s)^{3/4}
        let oracle = |a: f64, b: f64| (4.0 / 3.0) * ((1.0 - a).powf(0.75) - (1.0 - b).powf(0.75));
        assert_relative_eq!(frac.cell_integral(0.0, 1.0, 1.0).unwrap(), 4.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(
            frac.cell_integral(0.5, 1.0, 1.0).unwrap(),
            oracle(0.5, 1.0),
            max_relative = 1e-14
        );
        assert_relative_eq!(oracle(0.5, 1.0), (4.0 / 3.0) * 0.5f64.powf(0.75), max_relative = 1e-15);
    }

    #[test]
    fn graded_quadrature_matches_antiderivative_for_profile_kernels() {
        // same power law, but routed through the generic profile path
        for alpha in [0.1, 0.25, 0.45, 0.8] {
            let exact = KernelSpec::fractional(alpha, 1.0).unwrap();
            let generic = KernelSpec::convolution("p", 1.0, move |u: f64| u.powf(-alpha))
                .unwrap()
                .with_singularity(alpha)
                .unwrap();
            for (a, b, t) in [(0.0, 1.0, 1.0), (0.5, 0.75, 1.0), (0.999, 1.0, 1.0), (0.1, 0.2, 0.9)] {
                let want = exact.cell_integral(a, b, t).unwrap();
                let got = generic.cell_integral(a, b, t).unwrap();
                assert!((got - want).abs() <= 1e-8 * want.abs(), "alpha={alpha} [{a},{b}] t={t}");
            }
        }
    }

    #[test]
    fn general_form_singular_kernel_integrates_near_diagonal() {
        let k = KernelSpec::general("g", 1.0, |s: f64, t: f64| (t - s).powf(-0.3) * (1.0 + s))
            .unwrap()
            .with_singularity(0.3)
            .unwrap();
        // ∫_0^1 (1-s)^{-0.3}(1+s) ds = ∫_0^1 u^{-0.3}(2-u) du = 2/0.7 - 1/1.7
        let want = 2.0 / 0.7 - 1.0 / 1.7;
        assert_relative_eq!(k.cell_integral(0.0, 1.0, 1.0).unwrap(), want, max_relative = 1e-9);
    }

    #[test]
    fn lq_norm_examples() {
        let frac = KernelSpec::fractional(0.25, 1.0).unwrap();
        assert_relative_eq!(frac.lq_norm(1.0, 2.0).unwrap(), 2f64.sqrt(), max_relative = 1e-9);
        let one = KernelSpec::constant(1.0, 2.0).unwrap();
        assert_relative_eq!(one.lq_norm(2.0, 1.0).unwrap(), 2.0, max_relative = 1e-14);
        let half = KernelSpec::fractional(0.5, 1.0).unwrap();
        assert!(matches!(half.lq_norm(1.0, 2.0), Err(Error::DivergentIntegral { .. })));
    }

    #[test]
    fn lq_norm_is_stable_under_cell_halving() {
        let opts = QuadratureOptions::default();
        for k in [
            KernelSpec::fractional(0.3, 1.0).unwrap(),
            KernelSpec::exponential(2.0, 1.0).unwrap(),
            KernelSpec::lipschitz_profile(&[0.0, 0.3, 1.0], &[1.0, 0.2, 0.5], 1.0).unwrap(),
        ] {
            let mut cells = 1;
            let mut prev = k.lq_norm_with(0.8, 1.5, &opts).unwrap();
            for _ in 0..4 {
                cells *= 2;
                let next = k
                    .lq_norm_with(0.8, 1.5, &QuadratureOptions { initial_cells: cells, ..opts })
                    .unwrap();
                assert!((next - prev).abs() <= 10.0 * opts.rel_tol * prev, "{}", k.name());
                prev = next;
            }
        }
    }

    #[test]
    fn base_integrability_examples() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let grid: Vec<f64> = (1..=8).map(|k| k as f64 / 8.0).collect();
        let r = check_base_integrability(&one, &KernelSpec::fractional(0.25, 1.0).unwrap(), &grid).unwrap();
        assert!(r.passed);
        assert_relative_eq!(r.value("max_l2_norm_k_sigma").unwrap(), 2f64.sqrt(), max_relative = 1e-9);
        let r = check_base_integrability(&one, &KernelSpec::fractional(0.5, 1.0).unwrap(), &grid).unwrap();
        assert!(!r.passed);
        assert!(r.worst_ratio > 1.0);
        let r = check_base_integrability(&KernelSpec::fractional(0.9, 1.0).unwrap(), &one, &grid).unwrap();
        assert!(r.passed);
        // ∫_0^1 u^{-0.9} du = 10
        assert_relative_eq!(r.value("max_l1_norm_k_mu").unwrap(), 10.0, max_relative = 1e-9);
    }

    #[test]
    fn regularity_params_validate() {
        assert!(RegularityParams::new(3.0, 0.3).is_err());
        assert!(RegularityParams::new(16.0, 0.1).is_err());
        assert!(RegularityParams::new(16.0, 0.5).is_err());
        let p = RegularityParams::fractional_admissible(0.25, 16.0).unwrap();
        assert_relative_eq!(p.gamma, 0.1875);
    }

    #[test]
    fn tail_summand_matches_closed_form() {
        // ∫_t^{t'} (t' - s)^{-αq} ds = h^{1-αq} / (1 - αq)
        let k = KernelSpec::fractional(0.25, 1.0).unwrap();
        let q = 2.0 * 16.0 / 14.0;
        let s = regularity_summands(&k, 0.5, 0.5 + 1.0 / 64.0, q).unwrap();
        let e = 1.0 - 0.25 * q;
        assert_relative_eq!(s.tail, (1.0f64 / 64.0).powf(e) / e, max_relative = 1e-9);
    }

    #[test]
    fn regularity_examples() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let pairs = dyadic_pairs(1.0, &[0.25, 0.5], 3..=14);
        let params = RegularityParams::fractional_admissible(0.25, 16.0).unwrap();
        let frac = KernelSpec::fractional(0.25, 1.0).unwrap();
        let r = check_regularity(&one, &frac, &params, &pairs).unwrap();
        assert!(r.passed, "{:?}", r.notes);
        let slope = r.value("slope_tail_sigma").unwrap();
        assert!((slope - params.diffusion_exponent()).abs() < 0.01);

        let steep = KernelSpec::fractional(0.45, 1.0).unwrap();
        let r = check_regularity(&one, &steep, &RegularityParams::new(16.0, 0.1875).unwrap(), &pairs).unwrap();
        assert!(!r.passed);

        let r = check_regularity(&one, &one, &RegularityParams::new(16.0, 0.25).unwrap(), &pairs).unwrap();
        assert!(r.passed);
        assert_relative_eq!(r.value("slope_tail_sigma").unwrap(), 1.0, max_relative = 1e-9);
        assert!(r.value("slope_increment_sigma").is_none());
    }

    #[test]
    fn regularity_requires_enough_scales() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let pairs = dyadic_pairs(1.0, &[0.5], 2..=6);
        let params = RegularityParams::new(16.0, 0.25).unwrap();
        assert!(matches!(
            check_regularity(&one, &one, &params, &pairs),
            Err(Error::GridTooCoarse { found: 5, required: 8 })
        ));
    }

    #[test]
    fn supplied_constant_is_enforced() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let pairs = dyadic_pairs(1.0, &[0.5], 2..=12);
        let params = RegularityParams::new(16.0, 0.25).unwrap();
        let fitted = check_regularity(&one, &one, &params, &pairs).unwrap().fitted_constant.unwrap();
        let ok = check_regularity(&one, &one, &params.with_constant(fitted * 1.01), &pairs).unwrap();
        assert!(ok.passed && ok.worst_ratio <= 1.0);
        let tight = check_regularity(&one, &one, &params.with_constant(fitted * 0.5), &pairs).unwrap();
        assert!(!tight.passed && tight.worst_ratio > 1.0);
    }

    #[test]
    fn structural_examples() {
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let exp = KernelSpec::exponential(1.0, 1.0).unwrap();
        let r = check_structural(&one, &exp, 2.0, StructuralClaim::Detect).unwrap();
        assert!(r.passed);
        assert_eq!(r.branches, vec!["bounded_ac", "convolution_l2"]);

        let frac = KernelSpec::fractional(0.25, 1.0).unwrap();
        let r = check_structural(&one, &frac, 2.0, StructuralClaim::Detect).unwrap();
        assert_eq!(r.branches, vec!["convolution_l2"]);

        let st = KernelSpec::general("s*t", 1.0, |s, t| s * t).unwrap().with_bound(1.0);
        assert!(matches!(
            check_structural(&one, &st, 2.0, StructuralClaim::BoundedAbsolutelyContinuous),
            Err(Error::MissingDerivative { .. })
        ));
        let r = check_structural(&one, &st, 2.0, StructuralClaim::Detect).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn invariants_hold_for_builtin_families() {
        for k in [
            KernelSpec::constant(2.0, 1.0).unwrap(),
            KernelSpec::fractional(0.3, 1.0).unwrap(),
            KernelSpec::exponential(1.5, 2.0).unwrap(),
            KernelSpec::lipschitz_profile(&[0.0, 0.5, 1.0], &[1.0, 0.0, 0.5], 1.0).unwrap(),
        ] {
            let r = k.verify_invariants(8);
            assert!(r.passed, "{}: {:?}", k.name(), r.notes);
        }
        let liar = KernelSpec::exponential(1.0, 1.0).unwrap().with_partial1(|_, _| 0.0);
        assert!(!liar.verify_invariants(8).passed);
    }
}
