//! Quantitative checks on simulated ensembles: moment bounds, increment
//! scaling, the integration-by-parts and Fubini identities behind the
//! existence proof, and coupled convergence of the mollified sequence.
//!
//! Every check exists in two forms: a function over an in-memory
//! [`Ensemble`] and an accumulator implementing [`PathStatistic`], for runs
//! too large to hold.

use serde::Serialize;

use crate::coefficients::Coefficient;
use crate::engine::{Ensemble, InitialCondition, PathBundle, PathStatistic, Scheme, VolterraWeights};
use crate::error::{invalid, Error, Result};
use crate::kernels::{KernelForm, KernelSpec};
use crate::quadrature::QuadratureOptions;
use crate::report::{Measurement, Tabular};
use crate::stats::{ecdf_distance, linear_fit, quantile_sorted, Moments};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub certifies: String,
    pub q: f64,
    /// `max_i mean |X_{t_i}|^q`
    pub value: f64,
    /// Monte Carlo standard error at the maximizing time.
    pub stderr: f64,
    pub argmax_time: f64,
    pub paths: u64,
}

impl Tabular for MomentReport {
    fn rows(&self) -> Vec<Measurement> {
        vec![Measurement::new(format!("moment_sup_q{}", self.q), self.value)
            .at(self.argmax_time)
            .with_stderr(self.stderr)]
    }
}

/// Streaming accumulator for [`moment_sup`].
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    q: f64,
    horizon: f64,
    per_time: Vec<Moments>,
}

impl MomentAccumulator {
    pub fn new(q: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(q >= 1.0 && q.is_finite()) {
            return Err(invalid(format!("moment order must be >= 1, got {q}")));
        }
        Ok(Self {
            q,
            horizon,
            per_time: vec![Moments::default(); steps + 1],
        })
    }
}

impl PathStatistic<PathBundle> for MomentAccumulator {
    type Output = MomentReport;

    fn observe(&mut self, bundle: &PathBundle) {
        for (m, x) in self.per_time.iter_mut().zip(&bundle.x) {
            m.push(x.abs().powf(self.q));
        }
    }

    fn merge(&mut self, later: Self) {
        for (m, l) in self.per_time.iter_mut().zip(&later.per_time) {
            m.merge(l);
        }
    }

    fn finish(self) -> MomentReport {
        let steps = self.per_time.len() - 1;
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (i, m) in self.per_time.iter().enumerate() {
            if m.mean() > best {
                best = m.mean();
                arg = i;
            }
        }
        let at = &self.per_time[arg];
        MomentReport {
            certifies: "moment-bound".into(),
            q: self.q,
            value: best,
            stderr: at.stderr(),
            argmax_time: self.horizon * arg as f64 / steps as f64,
            paths: at.count,
        }
    }
}

/// Largest empirical `E|X_t|^q` over the grid.
pub fn moment_sup(ensemble: &Ensemble, q: f64) -> Result<MomentReport> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientPaths { have: 0, need: 1 });
    }
    let mut acc = MomentAccumulator::new(q, ensemble.horizon, ensemble.steps)?;
    for b in &ensemble.bundles {
        acc.observe(b);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderReport {
    pub certifies: String,
    pub p: f64,
    /// Gap lengths (time units) used in the regression.
    pub gaps: Vec<f64>,
    /// Mean `|ΔY|^p` per gap, `Y = X - x0`.
    pub moments: Vec<f64>,
    pub slope: f64,
    pub r_squared: f64,
    /// `slope / p`
    pub beta_hat: f64,
    /// `(0, γ - 1/p)` when `γ` is known.
    pub band: Option<(f64, f64)>,
    pub tolerance: f64,
    pub min_r_squared: f64,
    pub passed: bool,
}

impl Tabular for HolderReport {
    fn rows(&self) -> Vec<Measurement> {
        let mut rows: Vec<Measurement> = self
            .gaps
            .iter()
            .zip(&self.moments)
            .map(|(g, m)| Measurement::new(format!("increment_moment_p{}", self.p), *m).at(*g))
            .collect();
        rows.push(Measurement::new("slope", self.slope));
        rows.push(Measurement::new("beta_hat", self.beta_hat));
        rows.push(Measurement::new("r_squared", self.r_squared));
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolderOptions {
    /// Largest number of dyadic gaps `1, 2, 4, ...` steps.
    pub max_scales: usize,
    pub min_scales: usize,
    pub tolerance: f64,
    pub min_r_squared: f64,
    /// Regularity exponent of the model, if known, for the reported band.
    pub gamma: Option<f64>,
}

impl Default for HolderOptions {
    fn default() -> Self {
        Self {
            max_scales: 8,
            min_scales: 5,
            tolerance: 0.05,
            min_r_squared: 0.98,
            gamma: None,
        }
    }
}

/// Streaming accumulator for [`holder_estimate`].
#[derive(Debug, Clone)]
pub struct HolderAccumulator {
    p: f64,
    horizon: f64,
    x0: Vec<f64>,
    gaps: Vec<usize>,
    sums: Vec<Moments>,
    opts: HolderOptions,
}

impl HolderAccumulator {
    pub fn new(p: f64, x0: &InitialCondition, horizon: f64, steps: usize, opts: &HolderOptions) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(invalid(format!("moment order must be positive, got {p}")));
        }
        // keep at least four disjoint windows at the largest gap
        let gaps: Vec<usize> = (0..opts.max_scales)
            .map(|k| 1usize << k)
            .take_while(|g| 4 * g <= steps)
            .collect();
        if gaps.len() < opts.min_scales {
            return Err(Error::GridTooCoarse {
                found: gaps.len(),
                required: opts.min_scales,
            });
        }
        let x0 = (0..=steps)
            .map(|i| x0.eval(horizon * i as f64 / steps as f64))
            .collect();
        Ok(Self {
            p,
            horizon,
            x0,
            sums: vec![Moments::default(); gaps.len()],
            gaps,
            opts: opts.clone(),
        })
    }
}

impl PathStatistic<PathBundle> for HolderAccumulator {
    type Output = HolderReport;

    fn observe(&mut self, bundle: &PathBundle) {
        let y: Vec<f64> = bundle.x.iter().zip(&self.x0).map(|(x, c)| x - c).collect();
        for (g, m) in self.gaps.iter().zip(self.sums.iter_mut()) {
            let mut total = 0.0;
            for i in 0..y.len() - g {
                total += (y[i + g] - y[i]).abs().powf(self.p);
            }
            m.push(total / (y.len() - g) as f64);
        }
    }

    fn merge(&mut self, later: Self) {
        for (m, l) in self.sums.iter_mut().zip(&later.sums) {
            m.merge(l);
        }
    }

    fn finish(self) -> HolderReport {
        let steps = self.x0.len() - 1;
        let dt = self.horizon / steps as f64;
        let gaps: Vec<f64> = self.gaps.iter().map(|&g| g as f64 * dt).collect();
        let moments: Vec<f64> = self.sums.iter().map(Moments::mean).collect();
        let lx: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
        let ly: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
        let fit = if ly.iter().all(|v| v.is_finite()) {
            linear_fit(&lx, &ly)
        } else {
            None
        };
        let (slope, r_squared) = fit.map_or((f64::NAN, 0.0), |f| (f.slope, f.r_squared));
        let beta_hat = slope / self.p;
        let band = self.opts.gamma.map(|g| (0.0, g - 1.0 / self.p));
        let passed = beta_hat >= -self.opts.tolerance && r_squared >= self.opts.min_r_squared;
        HolderReport {
            certifies: "holder-regularity".into(),
            p: self.p,
            gaps,
            moments,
            slope,
            r_squared,
            beta_hat,
            band,
            tolerance: self.opts.tolerance,
            min_r_squared: self.opts.min_r_squared,
            passed,
        }
    }
}

/// Regresses `log E|(X_{t'} - x0(t')) - (X_t - x0(t))|^p` on `log |t' - t|`
/// over dyadic gaps, averaging over all start times and paths.
pub fn holder_estimate(ensemble: &Ensemble, p: f64, x0: &InitialCondition) -> Result<HolderReport> {
    holder_estimate_with(ensemble, p, x0, &HolderOptions::default())
}

pub fn holder_estimate_with(
    ensemble: &Ensemble,
    p: f64,
    x0: &InitialCondition,
    opts: &HolderOptions,
) -> Result<HolderReport> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientPaths { have: 0, need: 1 });
    }
    let mut acc = HolderAccumulator::new(p, x0, ensemble.horizon, ensemble.steps, opts)?;
    for b in &ensemble.bundles {
        acc.observe(b);
    }
    Ok(acc.finish())
}

fn grid_x0(x0: &InitialCondition, bundle: &PathBundle) -> Vec<f64> {
    bundle.grid.iter().map(|&t| x0.eval(t)).collect()
}

fn check_uniform(bundle: &PathBundle) -> Result<(f64, usize)> {
    let n = bundle.steps();
    let horizon = bundle.grid[n];
    let uniform = bundle
        .grid
        .iter()
        .enumerate()
        .all(|(i, &t)| t == horizon * i as f64 / n as f64);
    if !uniform || bundle.x.len() != n + 1 || bundle.m.len() != n + 1 {
        return Err(Error::GridMismatch("bundle is not on a uniform grid".into()));
    }
    Ok((horizon, n))
}

/// Precomputed weights for [`ibp_identity_residual`], reusable across paths.
#[derive(Debug, Clone)]
pub struct IbpIdentity {
    w_mu: VolterraWeights,
    diagonal: Vec<f64>,
    /// Packed rows of `∂₁K_σ(t_j, t_i) Δt`, `j < i`.
    derivative: Vec<f64>,
    x0: InitialCondition,
    mu: Coefficient,
}

impl IbpIdentity {
    pub fn new(
        x0: &InitialCondition,
        k_mu: &KernelSpec,
        k_sigma: &KernelSpec,
        mu_level: &Coefficient,
        scheme: Scheme,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        if !k_sigma.has_partial1() {
            return Err(Error::MissingDerivative {
                kernel: k_sigma.name().to_string(),
            });
        }
        let dt = horizon / steps as f64;
        let time = |i: usize| horizon * i as f64 / steps as f64;
        let diagonal = (0..=steps)
            .map(|i| k_sigma.eval(time(i), time(i)))
            .collect::<Result<Vec<f64>>>()?;
        let mut derivative = Vec::with_capacity(steps * (steps + 1) / 2);
        for i in 1..=steps {
            for j in 0..i {
                derivative.push(k_sigma.partial1(time(j), time(i))? * dt);
            }
        }
        Ok(Self {
            w_mu: VolterraWeights::build(k_mu, scheme, horizon, steps)?,
            diagonal,
            derivative,
            x0: x0.clone(),
            mu: mu_level.clone(),
        })
    }

    /// Residual path `|X_i - x0_i - D_i - K_σ(t_i,t_i) M_i + Σ_j M_j ∂₁K_σ(t_j,t_i) Δt|`.
    pub fn residuals(&self, bundle: &PathBundle) -> Result<Vec<f64>> {
        let (_, n) = check_uniform(bundle)?;
        if self.diagonal.len() != n + 1 {
            return Err(Error::GridMismatch(format!(
                "identity built for {} steps, bundle has {n}",
                self.diagonal.len() - 1
            )));
        }
        let dt = bundle.dt();
        let x0 = grid_x0(&self.x0, bundle);
        // drift integral rebuilt exactly as the engine accumulates it
        let mut a = vec![0.0; n + 1];
        let mut da = vec![0.0; n];
        for i in 1..=n {
            let j = i - 1;
            a[i] = a[j] + self.mu.eval(bundle.grid[j], bundle.x[j]) * dt;
            da[j] = a[i] - a[j];
        }
        let mut out = vec![0.0; n + 1];
        out[0] = (bundle.x[0] - x0[0]).abs();
        for i in 1..=n {
            let drift = self.w_mu.apply(i, &a, &da);
            let start = i * (i - 1) / 2;
            let correction = crate::engine::dot(&self.derivative[start..start + i], &bundle.m[..i]);
            let rhs = ((x0[i] + drift) + self.diagonal[i] * bundle.m[i]) - correction;
            out[i] = (bundle.x[i] - rhs).abs();
        }
        Ok(out)
    }

    pub fn residual(&self, bundle: &PathBundle) -> Result<f64> {
        Ok(self.residuals(bundle)?.into_iter().fold(0.0, f64::max))
    }
}

/// Sup over the grid of the discrete integration-by-parts residual
/// `X_t - x0(t) - ∫K_μ μ ds - K_σ(t,t) M_t + ∫ M_s ∂₁K_σ(s,t) ds`,
/// from `∫K_σ(s,t) dM_s = K_σ(t,t) M_t - ∫ M_s ∂₁K_σ(s,t) ds`.
/// The drift term uses the generating scheme's weights.
pub fn ibp_identity_residual(
    bundle: &PathBundle,
    x0: &InitialCondition,
    k_mu: &KernelSpec,
    k_sigma: &KernelSpec,
    mu_level: &Coefficient,
    scheme: Scheme,
) -> Result<f64> {
    let (horizon, n) = check_uniform(bundle)?;
    IbpIdentity::new(x0, k_mu, k_sigma, mu_level, scheme, horizon, n)?.residual(bundle)
}

/// Precomputed cell masses for [`fubini_identity_residual`].
#[derive(Debug, Clone)]
pub struct FubiniIdentity {
    /// `mass[l] = ∫_{(l-1)Δt}^{lΔt} K(u) du`, reversed like Toeplitz weights.
    rev_mu: Vec<f64>,
    rev_sigma: Vec<f64>,
    x0: InitialCondition,
}

fn reversed_masses(kernel: &KernelSpec, horizon: f64, steps: usize) -> Result<Vec<f64>> {
    if kernel.form() != KernelForm::Convolution {
        return Err(Error::NotConvolution {
            kernel: kernel.name().to_string(),
        });
    }
    let dt = horizon / steps as f64;
    let opts = QuadratureOptions::default();
    let mut rev = vec![0.0; steps];
    for lag in 1..=steps {
        rev[steps - lag] = kernel.gap_integral((lag - 1) as f64 * dt, lag as f64 * dt, &opts)?;
    }
    Ok(rev)
}

impl FubiniIdentity {
    pub fn new(x0: &InitialCondition, k_mu: &KernelSpec, k_sigma: &KernelSpec, horizon: f64, steps: usize) -> Result<Self> {
        Ok(Self {
            rev_mu: reversed_masses(k_mu, horizon, steps)?,
            rev_sigma: reversed_masses(k_sigma, horizon, steps)?,
            x0: x0.clone(),
        })
    }

    pub fn residuals(&self, bundle: &PathBundle) -> Result<Vec<f64>> {
        let (_, n) = check_uniform(bundle)?;
        if self.rev_mu.len() != n {
            return Err(Error::GridMismatch(format!(
                "identity built for {} steps, bundle has {n}",
                self.rev_mu.len()
            )));
        }
        let dt = bundle.dt();
        let x0 = grid_x0(&self.x0, bundle);
        let mid = |p: &[f64]| -> Vec<f64> { p.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect() };
        let (a_mid, m_mid) = (mid(&bundle.a), mid(&bundle.m));
        let mut out = vec![0.0; n + 1];
        let (mut lhs, mut base) = (0.0, 0.0);
        for i in 1..=n {
            lhs += 0.5 * dt * (bundle.x[i - 1] + bundle.x[i]);
            base += 0.5 * dt * (x0[i - 1] + x0[i]);
            let drift = crate::engine::dot(&self.rev_mu[n - i..], &a_mid[..i]);
            let noise = crate::engine::dot(&self.rev_sigma[n - i..], &m_mid[..i]);
            out[i] = (lhs - (base + drift + noise)).abs();
        }
        Ok(out)
    }

    pub fn residual(&self, bundle: &PathBundle) -> Result<f64> {
        Ok(self.residuals(bundle)?.into_iter().fold(0.0, f64::max))
    }
}

/// Sup over the grid of the discrete stochastic-Fubini residual
/// `∫X ds - ∫x0 ds - ∫K_μ(t-s) A_s ds - ∫K_σ(t-s) M_s ds`.
pub fn fubini_identity_residual(
    bundle: &PathBundle,
    x0: &InitialCondition,
    k_mu: &KernelSpec,
    k_sigma: &KernelSpec,
) -> Result<f64> {
    let (horizon, n) = check_uniform(bundle)?;
    FubiniIdentity::new(x0, k_mu, k_sigma, horizon, n)?.residual(bundle)
}

/// Statistics for one consecutive level pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelPair {
    pub from: u32,
    pub to: u32,
    pub median_sup_diff: f64,
    pub q90_sup_diff: f64,
    /// Two-sample KS distance of the marginals at the probe time.
    pub marginal_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub certifies: String,
    pub levels: Vec<u32>,
    pub probe_time: f64,
    pub paths: usize,
    pub pairs: Vec<LevelPair>,
    /// Medians of the coupled sup-norm differences are non-increasing.
    pub monotone: bool,
    pub notes: Vec<String>,
}

impl Tabular for ConvergenceReport {
    fn rows(&self) -> Vec<Measurement> {
        let mut rows = Vec::new();
        for p in &self.pairs {
            let at = p.from as f64;
            rows.push(Measurement::new("median_sup_diff", p.median_sup_diff).at(at));
            rows.push(Measurement::new("q90_sup_diff", p.q90_sup_diff).at(at));
            rows.push(Measurement::new("marginal_distance", p.marginal_distance).at(at));
        }
        rows
    }
}

/// Streaming accumulator over coupled bundles (one per level, same path).
#[derive(Debug, Clone)]
pub struct ConvergenceAccumulator {
    levels: Vec<u32>,
    probe_index: usize,
    probe_time: f64,
    sup_diffs: Vec<Vec<f64>>,
    probes: Vec<Vec<f64>>,
}

impl ConvergenceAccumulator {
    pub fn new(levels: &[u32], probe_time: f64, horizon: f64, steps: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("need at least one level"));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("levels must be strictly increasing"));
        }
        if !(0.0..=horizon).contains(&probe_time) {
            return Err(invalid(format!("probe time {probe_time} lies outside [0, {horizon}]")));
        }
        let probe_index = ((probe_time / horizon) * steps as f64).round() as usize;
        Ok(Self {
            levels: levels.to_vec(),
            probe_index,
            probe_time,
            sup_diffs: vec![Vec::new(); levels.len() - 1],
            probes: vec![Vec::new(); levels.len()],
        })
    }

    pub fn empty(&self) -> Self {
        Self {
            sup_diffs: vec![Vec::new(); self.sup_diffs.len()],
            probes: vec![Vec::new(); self.probes.len()],
            ..self.clone()
        }
    }
}

impl PathStatistic<[PathBundle]> for ConvergenceAccumulator {
    type Output = ConvergenceReport;

    fn observe(&mut self, bundles: &[PathBundle]) {
        for (k, pair) in bundles.windows(2).enumerate() {
            let sup = pair[0]
                .x
                .iter()
                .zip(&pair[1].x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            self.sup_diffs[k].push(sup);
        }
        for (store, b) in self.probes.iter_mut().zip(bundles) {
            store.push(b.x[self.probe_index]);
        }
    }

    fn merge(&mut self, later: Self) {
        for (s, l) in self.sup_diffs.iter_mut().zip(later.sup_diffs) {
            s.extend(l);
        }
        for (s, l) in self.probes.iter_mut().zip(later.probes) {
            s.extend(l);
        }
    }

    fn finish(self) -> ConvergenceReport {
        let mut pairs = Vec::with_capacity(self.sup_diffs.len());
        for (k, mut diffs) in self.sup_diffs.into_iter().enumerate() {
            diffs.sort_by(f64::total_cmp);
            pairs.push(LevelPair {
                from: self.levels[k],
                to: self.levels[k + 1],
                median_sup_diff: quantile_sorted(&diffs, 0.5),
                q90_sup_diff: quantile_sorted(&diffs, 0.9),
                marginal_distance: ecdf_distance(&self.probes[k], &self.probes[k + 1]),
            });
        }
        let monotone = pairs.windows(2).all(|w| w[1].median_sup_diff <= w[0].median_sup_diff);
        ConvergenceReport {
            certifies: "mollified-convergence".into(),
            levels: self.levels,
            probe_time: self.probe_time,
            paths: self.probes.first().map_or(0, Vec::len),
            pairs,
            monotone,
            notes: vec![
                "coupled pathwise differences under common noise and marginal CDF distances are evidence of convergence, not a proof of it".into(),
            ],
        }
    }
}

/// Coupled sup-norm differences and marginal distances between consecutive
/// levels. All ensembles must share seed, grid and path indices.
pub fn convergence_report(sequence: &[(u32, Ensemble)], probe_time: f64) -> Result<ConvergenceReport> {
    let first = &sequence.first().ok_or_else(|| invalid("empty level sequence"))?.1;
    for (_, e) in sequence {
        if e.seed != first.seed {
            return Err(Error::SeedMismatch {
                first: first.seed,
                second: e.seed,
            });
        }
        if e.steps != first.steps || e.horizon != first.horizon {
            return Err(Error::GridMismatch(format!(
                "grid ({}, {}) differs from ({}, {})",
                e.horizon, e.steps, first.horizon, first.steps
            )));
        }
        let same_paths = e.bundles.len() == first.bundles.len()
            && e.bundles.iter().zip(&first.bundles).all(|(a, b)| a.path_index == b.path_index);
        if !same_paths {
            return Err(Error::GridMismatch("ensembles hold different path indices".into()));
        }
    }
    let levels: Vec<u32> = sequence.iter().map(|(n, _)| *n).collect();
    let mut acc = ConvergenceAccumulator::new(&levels, probe_time, first.horizon, first.steps)?;
    let mut coupled = Vec::with_capacity(sequence.len());
    for p in 0..first.bundles.len() {
        coupled.clear();
        coupled.extend(sequence.iter().map(|(_, e)| e.bundles[p].clone()));
        acc.observe(&coupled);
    }
    Ok(acc.finish())
}
