//! Monte Carlo path generation on a uniform grid `t_i = iT/N`.
//!
//! One step of the explicit scheme reads
//!
//! ```text
//! A_i = A_{i-1} + μ(t_{i-1}, X_{i-1}) Δt
//! M_i = M_{i-1} + σ(t_{i-1}, X_{i-1}) ΔB_{i-1}
//! X_i = x0(t_i) + Σ_{j<i} w^μ_{j,i} (A_{j+1} - A_j) + Σ_{j<i} w^σ_{j,i} (M_{j+1} - M_j)
//! ```
//!
//! The weights are kernel values (`LeftPoint`) or kernel cell averages
//! (`KernelAveraged`). They are built once per simulator and shared by every
//! path. Because [`reconstruct`] applies the same weights to the stored `A`
//! and `M`, it reproduces `X` bit for bit.
//!
//! Path `p` draws its Brownian increments from its own ChaCha stream keyed by
//! `(seed, p)`, so a path is the same whichever worker produces it. Ensemble
//! statistics are folded over fixed chunks of paths and merged in index
//! order, which makes every result independent of the thread count.

use std::borrow::Borrow;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{default_quadrature_order, mollify_on, Coefficient};
use crate::error::{invalid, Error, Result};
use crate::kernels::{KernelForm, KernelSpec};
use crate::quadrature::QuadratureOptions;

/// Paths per work unit. Fixed so that reductions do not depend on scheduling.
pub const CHUNK: u64 = 256;

/// Largest tolerated fraction of aborted paths.
pub const ABORT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LeftPoint,
    KernelAveraged,
}

#[derive(Clone)]
pub enum InitialCondition {
    Constant(f64),
    /// `a + b t`
    Linear { a: f64, b: f64 },
    Cos,
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Linear { a, b } => write!(f, "Linear {{ a: {a}, b: {b} }}"),
            Self::Cos => write!(f, "Cos"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl InitialCondition {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Linear { a, b } => a + b * t,
            Self::Cos => t.cos(),
            Self::Custom(f) => f(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: u64,
    pub seed: u64,
    pub scheme: Scheme,
    pub x0: InitialCondition,
}

impl SimConfig {
    pub fn new(horizon: f64, steps: usize, paths: u64, seed: u64) -> Self {
        Self {
            horizon,
            steps,
            paths,
            seed,
            scheme: Scheme::KernelAveraged,
            x0: InitialCondition::Constant(0.0),
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_x0(mut self, x0: InitialCondition) -> Self {
        self.x0 = x0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.steps < 2 {
            return Err(invalid(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.paths < 1 {
            return Err(invalid("paths must be at least 1"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        grid_time(self.horizon, self.steps, i)
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

#[inline]
fn grid_time(horizon: f64, steps: usize, i: usize) -> f64 {
    horizon * i as f64 / steps as f64
}

/// Coefficients and kernels of one equation.
#[derive(Debug, Clone)]
pub struct Model {
    pub mu: Coefficient,
    pub sigma: Coefficient,
    pub k_mu: KernelSpec,
    pub k_sigma: KernelSpec,
}

impl Model {
    pub fn new(mu: Coefficient, sigma: Coefficient, k_mu: KernelSpec, k_sigma: KernelSpec) -> Self {
        Self {
            mu,
            sigma,
            k_mu,
            k_sigma,
        }
    }
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub path_index: u64,
    pub grid: Arc<[f64]>,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub m: Vec<f64>,
    pub z: Vec<f64>,
    /// `db[j] = B_{t_{j+1}} - B_{t_j}`
    pub db: Vec<f64>,
}

impl PathBundle {
    fn empty(grid: Arc<[f64]>, seed: u64) -> Self {
        let n = grid.len();
        Self {
            seed,
            path_index: 0,
            grid,
            x: vec![0.0; n],
            a: vec![0.0; n],
            m: vec![0.0; n],
            z: vec![0.0; n],
            db: vec![0.0; n - 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.grid[self.grid.len() - 1] / self.steps() as f64
    }
}

/// Lower-triangular weights `w_{j,i}`, `j < i`.
#[derive(Debug, Clone, PartialEq)]
pub enum VolterraWeights {
    /// `w ≡ c`; applied as `c · P_i`, which telescopes exactly.
    Constant(f64),
    /// `w_{j,i} = w(i - j)`, stored reversed: `rev[N - l] = w(l)` for `l = 1..=N`.
    Toeplitz { rev: Vec<f64> },
    /// Packed rows: row `i` occupies `[i(i-1)/2, i(i+1)/2)`.
    Dense { packed: Vec<f64> },
}

impl VolterraWeights {
    pub fn build(kernel: &KernelSpec, scheme: Scheme, horizon: f64, steps: usize) -> Result<Self> {
        if let Some(c) = kernel.constant_value() {
            return Ok(Self::Constant(c));
        }
        let dt = horizon / steps as f64;
        let opts = QuadratureOptions::default();
        match (kernel.form(), scheme) {
            (KernelForm::Convolution, Scheme::LeftPoint) => {
                let mut rev = vec![0.0; steps];
                for lag in 1..=steps {
                    rev[steps - lag] = kernel.profile(lag as f64 * dt).expect("convolution profile");
                }
                Ok(Self::Toeplitz { rev })
            }
            (KernelForm::Convolution, Scheme::KernelAveraged) => {
                let mut rev = vec![0.0; steps];
                for lag in 1..=steps {
                    let near = (lag - 1) as f64 * dt;
                    let far = lag as f64 * dt;
                    rev[steps - lag] = kernel.gap_integral(near, far, &opts)? / dt;
                }
                Ok(Self::Toeplitz { rev })
            }
            (KernelForm::General, scheme) => {
                let mut packed = Vec::with_capacity(steps * (steps + 1) / 2);
                for i in 1..=steps {
                    let ti = grid_time(horizon, steps, i);
                    for j in 0..i {
                        let tj = grid_time(horizon, steps, j);
                        let w = match scheme {
                            Scheme::LeftPoint => kernel.eval(tj, ti)?,
                            Scheme::KernelAveraged => {
                                let tj1 = grid_time(horizon, steps, j + 1);
                                kernel.cell_integral_with(tj, tj1, ti, &opts)? / dt
                            }
                        };
                        packed.push(w);
                    }
                }
                Ok(Self::Dense { packed })
            }
        }
    }

    /// `w_{j,i}`.
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        assert!(j < i);
        match self {
            Self::Constant(c) => *c,
            Self::Toeplitz { rev } => rev[rev.len() - (i - j)],
            Self::Dense { packed } => packed[i * (i - 1) / 2 + j],
        }
    }

    /// `Σ_{j<i} w_{j,i} incr_j`, where `incr_j = level_{j+1} - level_j`.
    #[inline]
    pub fn apply(&self, i: usize, level: &[f64], incr: &[f64]) -> f64 {
        match self {
            Self::Constant(c) => {
                if *c == 1.0 {
                    level[i]
                } else {
                    c * level[i]
                }
            }
            Self::Toeplitz { rev } => dot(&rev[rev.len() - i..], &incr[..i]),
            Self::Dense { packed } => {
                let start = i * (i - 1) / 2;
                dot(&packed[start..start + i], &incr[..i])
            }
        }
    }
}

/// Dot product with eight independent accumulators in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// A statistic folded over paths in a fixed order.
pub trait PathStatistic<Obs: ?Sized>: Send + Sized {
    type Output;
    fn observe(&mut self, obs: &Obs);
    /// Absorbs a statistic over the paths that follow this one's.
    fn merge(&mut self, later: Self);
    fn finish(self) -> Self::Output;
}

/// Collects every observed bundle.
#[derive(Debug, Default)]
pub struct Collect(pub Vec<PathBundle>);

impl PathStatistic<PathBundle> for Collect {
    type Output = Vec<PathBundle>;

    fn observe(&mut self, obs: &PathBundle) {
        self.0.push(obs.clone());
    }

    fn merge(&mut self, later: Self) {
        self.0.extend(later.0);
    }

    fn finish(self) -> Vec<PathBundle> {
        self.0
    }
}

/// Result of a streamed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome<O> {
    pub value: O,
    pub paths: u64,
    /// Indices of paths that hit a non-finite state and were excluded.
    pub aborted: Vec<u64>,
}

/// All bundles of a run held in memory. Only sensible for moderate sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub seed: u64,
    pub horizon: f64,
    pub steps: usize,
    pub bundles: Vec<PathBundle>,
    pub aborted: Vec<u64>,
}

impl Ensemble {
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| grid_time(self.horizon, self.steps, i)).collect()
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

/// Brownian increments of path `index`: `N` draws of `√Δt · N(0, 1)`.
pub fn brownian_increments(seed: u64, index: u64, steps: usize, dt: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let scale = dt.sqrt();
    for slot in out.iter_mut().take(steps) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *slot = scale * z;
    }
}

/// Path generator for one model and configuration.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    model: Model,
    scheme: Scheme,
    w_mu: Arc<VolterraWeights>,
    w_sigma: Arc<VolterraWeights>,
    grid: Arc<[f64]>,
    x0: Vec<f64>,
    log: Vec<String>,
}

impl Simulator {
    pub fn new(cfg: SimConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        for k in [&model.k_mu, &model.k_sigma] {
            if k.horizon() < cfg.horizon * (1.0 - 1e-12) {
                return Err(invalid(format!(
                    "kernel `{}` is defined up to {} but the run needs {}",
                    k.name(),
                    k.horizon(),
                    cfg.horizon
                )));
            }
        }
        model.k_mu.lq_norm(cfg.horizon, 1.0)?;
        model.k_sigma.lq_norm(cfg.horizon, 2.0)?;
        let mut log = Vec::new();
        let mut scheme = cfg.scheme;
        if scheme == Scheme::LeftPoint && (model.k_mu.is_singular() || model.k_sigma.is_singular()) {
            scheme = Scheme::KernelAveraged;
            log.push("left-point weights need kernel values on the diagonal band; switched to kernel-averaged weights because a kernel is singular".into());
        }
        let w_mu = VolterraWeights::build(&model.k_mu, scheme, cfg.horizon, cfg.steps)?;
        let w_sigma = VolterraWeights::build(&model.k_sigma, scheme, cfg.horizon, cfg.steps)?;
        Self::assemble(cfg, model, scheme, Arc::new(w_mu), Arc::new(w_sigma), log)
    }

    fn assemble(
        cfg: SimConfig,
        model: Model,
        scheme: Scheme,
        w_mu: Arc<VolterraWeights>,
        w_sigma: Arc<VolterraWeights>,
        log: Vec<String>,
    ) -> Result<Self> {
        let grid: Arc<[f64]> = cfg.grid().into();
        let x0 = grid.iter().map(|&t| cfg.x0.eval(t)).collect();
        Ok(Self {
            cfg,
            model,
            scheme,
            w_mu,
            w_sigma,
            grid,
            x0,
            log,
        })
    }

    /// Same grid, kernels and weights with different coefficients.
    pub fn with_coefficients(&self, mu: Coefficient, sigma: Coefficient) -> Self {
        Self {
            model: Model {
                mu,
                sigma,
                ..self.model.clone()
            },
            ..self.clone()
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// The scheme actually used, after any forced substitution.
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn grid(&self) -> &Arc<[f64]> {
        &self.grid
    }

    pub fn weights(&self) -> (&VolterraWeights, &VolterraWeights) {
        (&self.w_mu, &self.w_sigma)
    }

    pub fn new_bundle(&self) -> PathBundle {
        PathBundle::empty(Arc::clone(&self.grid), self.cfg.seed)
    }

    /// Simulates path `index`.
    pub fn path(&self, index: u64) -> Result<PathBundle> {
        let mut bundle = self.new_bundle();
        self.path_into(index, &mut bundle)?;
        Ok(bundle)
    }

    pub fn path_into(&self, index: u64, bundle: &mut PathBundle) -> Result<()> {
        brownian_increments(self.cfg.seed, index, self.cfg.steps, self.cfg.dt(), &mut bundle.db);
        bundle.path_index = index;
        bundle.seed = self.cfg.seed;
        self.evaluate(bundle)
    }

    /// Fills `x, a, m, z` from the increments already in `bundle.db`.
    pub fn evaluate(&self, bundle: &mut PathBundle) -> Result<()> {
        let n = self.cfg.steps;
        let dt = self.cfg.dt();
        if bundle.x.len() != n + 1 || bundle.db.len() != n {
            return Err(Error::GridMismatch(format!(
                "bundle has {} points, simulator expects {}",
                bundle.x.len(),
                n + 1
            )));
        }
        // increments of A and M, kept as differences of the stored levels
        let mut da = vec![0.0; n];
        let mut dm = vec![0.0; n];
        let PathBundle { x, a, m, z, db, .. } = bundle;
        x[0] = self.x0[0];
        a[0] = 0.0;
        m[0] = 0.0;
        z[0] = 0.0;
        for i in 1..=n {
            let j = i - 1;
            let t = self.grid[j];
            let drift = self.model.mu.eval(t, x[j]);
            let vol = self.model.sigma.eval(t, x[j]);
            a[i] = a[j] + drift * dt;
            m[i] = m[j] + vol * db[j];
            da[j] = a[i] - a[j];
            dm[j] = m[i] - m[j];
            z[i] = a[i] + m[i];
            x[i] = (self.x0[i] + self.w_mu.apply(i, a, &da)) + self.w_sigma.apply(i, m, &dm);
            if !(x[i].is_finite() && z[i].is_finite()) {
                return Err(Error::NonFiniteState {
                    path: bundle.path_index,
                    step: i,
                });
            }
        }
        Ok(())
    }

    /// `reconstruct` with this simulator's weights.
    pub fn reconstruct(&self, bundle: &PathBundle) -> Result<Vec<f64>> {
        apply_reconstruction(&self.x0, &self.w_mu, &self.w_sigma, bundle)
    }

    /// Streams all `cfg.paths` paths through a statistic built by `empty`.
    pub fn run<S, F>(&self, empty: F) -> Result<RunOutcome<S::Output>>
    where
        S: PathStatistic<PathBundle>,
        F: Fn() -> S + Sync,
    {
        fold_paths(self.cfg.paths, &empty, || self.new_bundle(), |index, bundle| {
            self.path_into(index, bundle)
        })
    }

    /// Simulates and keeps every path.
    pub fn simulate(&self) -> Result<Ensemble> {
        let out = self.run(Collect::default)?;
        Ok(Ensemble {
            seed: self.cfg.seed,
            horizon: self.cfg.horizon,
            steps: self.cfg.steps,
            bundles: out.value,
            aborted: out.aborted,
        })
    }
}

fn fold_paths<S, Obs, Buf, E, B, G>(total: u64, empty: &E, buffer: B, generate: G) -> Result<RunOutcome<S::Output>>
where
    Obs: ?Sized,
    Buf: Borrow<Obs>,
    S: PathStatistic<Obs>,
    E: Fn() -> S + Sync,
    B: Fn() -> Buf + Sync,
    G: Fn(u64, &mut Buf) -> Result<()> + Sync,
{
    let chunks = total.div_ceil(CHUNK);
    let parts: Vec<Result<(S, Vec<u64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stat = empty();
            let mut aborted = Vec::new();
            let mut obs = buffer();
            for index in c * CHUNK..((c + 1) * CHUNK).min(total) {
                match generate(index, &mut obs) {
                    Ok(()) => stat.observe(obs.borrow()),
                    Err(Error::NonFiniteState { .. }) => aborted.push(index),
                    Err(e) => return Err(e),
                }
            }
            Ok((stat, aborted))
        })
        .collect();
    let mut stat = empty();
    let mut aborted = Vec::new();
    for part in parts {
        let (s, a) = part?;
        stat.merge(s);
        aborted.extend(a);
    }
    if aborted.len() as f64 > ABORT_TOLERANCE * total as f64 {
        return Err(Error::TooManyAborted {
            aborted: aborted.len(),
            total,
        });
    }
    Ok(RunOutcome {
        value: stat.finish(),
        paths: total,
        aborted,
    })
}

fn apply_reconstruction(
    x0: &[f64],
    w_mu: &VolterraWeights,
    w_sigma: &VolterraWeights,
    bundle: &PathBundle,
) -> Result<Vec<f64>> {
    let n = x0.len() - 1;
    if bundle.a.len() != n + 1 || bundle.m.len() != n + 1 || bundle.x.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "bundle has {} points, weights expect {}",
            bundle.a.len(),
            n + 1
        )));
    }
    let da: Vec<f64> = bundle.a.windows(2).map(|w| w[1] - w[0]).collect();
    let dm: Vec<f64> = bundle.m.windows(2).map(|w| w[1] - w[0]).collect();
    let mut out = vec![0.0; n + 1];
    out[0] = x0[0];
    for i in 1..=n {
        out[i] = (x0[i] + w_mu.apply(i, &bundle.a, &da)) + w_sigma.apply(i, &bundle.m, &dm);
    }
    Ok(out)
}

/// `x0(t_i) + Σ_{j<i} K̄_μ(t_j,t_i)(A_{j+1}-A_j) + Σ_{j<i} K̄_σ(t_j,t_i)(M_{j+1}-M_j)`.
///
/// `scheme` must be the scheme that generated the bundle (after any forced
/// substitution) for the result to equal `bundle.x` exactly.
pub fn reconstruct(
    x0: &InitialCondition,
    k_mu: &KernelSpec,
    k_sigma: &KernelSpec,
    scheme: Scheme,
    bundle: &PathBundle,
) -> Result<Vec<f64>> {
    let n = bundle.steps();
    let horizon = bundle.grid[n];
    let expected: Vec<f64> = (0..=n).map(|i| grid_time(horizon, n, i)).collect();
    if expected.as_slice() != &bundle.grid[..] {
        return Err(Error::GridMismatch("bundle grid is not uniform".into()));
    }
    let w_mu = VolterraWeights::build(k_mu, scheme, horizon, n)?;
    let w_sigma = VolterraWeights::build(k_sigma, scheme, horizon, n)?;
    let x0: Vec<f64> = expected.iter().map(|&t| x0.eval(t)).collect();
    apply_reconstruction(&x0, &w_mu, &w_sigma, bundle)
}

/// Simulates every path of `model` under `cfg`.
pub fn simulate(cfg: SimConfig, model: Model) -> Result<Ensemble> {
    Simulator::new(cfg, model)?.simulate()
}

/// Coupled ensembles of the approximating equations, one per level.
pub fn simulate_mollified_sequence(cfg: SimConfig, model: Model, levels: &[u32]) -> Result<Vec<(u32, Ensemble)>> {
    mollified_sequence(cfg, model, levels)?.simulate()
}

/// Simulators for the approximating equations with mollified coefficients,
/// all driven by the same Brownian increments.
#[derive(Debug, Clone)]
pub struct MollifiedSequence {
    levels: Vec<u32>,
    simulators: Vec<Simulator>,
}

/// One simulator per level, sharing the weights of the unmollified model.
pub fn mollified_sequence(cfg: SimConfig, model: Model, levels: &[u32]) -> Result<MollifiedSequence> {
    if levels.is_empty() {
        return Err(invalid("need at least one mollification level"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("mollification levels must be strictly increasing"));
    }
    let horizon = cfg.horizon;
    let base = Simulator::new(cfg, model)?;
    let mut simulators = Vec::with_capacity(levels.len());
    for &n in levels {
        let order = default_quadrature_order(n);
        let mu = mollify_on(&base.model.mu, n, order, horizon)?.into_coefficient();
        let sigma = mollify_on(&base.model.sigma, n, order, horizon)?.into_coefficient();
        simulators.push(base.with_coefficients(mu, sigma));
    }
    Ok(MollifiedSequence {
        levels: levels.to_vec(),
        simulators,
    })
}

impl MollifiedSequence {
    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn simulator(&self, level: u32) -> Option<&Simulator> {
        self.levels.iter().position(|&l| l == level).map(|k| &self.simulators[k])
    }

    pub fn simulators(&self) -> &[Simulator] {
        &self.simulators
    }

    /// Streams every path index through `empty()`, observing the bundles of
    /// all levels at once. A path aborted at any level is aborted everywhere.
    pub fn run<S, F>(&self, empty: F) -> Result<RunOutcome<S::Output>>
    where
        S: PathStatistic<[PathBundle]>,
        F: Fn() -> S + Sync,
    {
        let first = &self.simulators[0];
        let cfg = first.config();
        fold_paths(
            cfg.paths,
            &empty,
            || -> Vec<PathBundle> { self.simulators.iter().map(Simulator::new_bundle).collect() },
            |index, bundles: &mut Vec<PathBundle>| {
                brownian_increments(cfg.seed, index, cfg.steps, cfg.dt(), &mut bundles[0].db);
                let (head, tail) = bundles.split_first_mut().expect("one level");
                head.path_index = index;
                for b in tail.iter_mut() {
                    b.db.copy_from_slice(&head.db);
                    b.path_index = index;
                }
                for (sim, b) in self.simulators.iter().zip(bundles.iter_mut()) {
                    sim.evaluate(b)?;
                }
                Ok(())
            },
        )
    }

    /// Every level's ensemble held in memory.
    pub fn simulate(&self) -> Result<Vec<(u32, Ensemble)>> {
        struct PerLevel(Vec<Vec<PathBundle>>);
        impl PathStatistic<[PathBundle]> for PerLevel {
            type Output = Vec<Vec<PathBundle>>;
            fn observe(&mut self, obs: &[PathBundle]) {
                for (store, b) in self.0.iter_mut().zip(obs) {
                    store.push(b.clone());
                }
            }
            fn merge(&mut self, later: Self) {
                for (store, more) in self.0.iter_mut().zip(later.0) {
                    store.extend(more);
                }
            }
            fn finish(self) -> Self::Output {
                self.0
            }
        }
        let k = self.levels.len();
        let out = self.run(|| PerLevel(vec![Vec::new(); k]))?;
        let cfg = self.simulators[0].config();
        Ok(self
            .levels
            .iter()
            .zip(out.value)
            .map(|(&n, bundles)| {
                (
                    n,
                    Ensemble {
                        seed: cfg.seed,
                        horizon: cfg.horizon,
                        steps: cfg.steps,
                        bundles,
                        aborted: out.aborted.clone(),
                    },
                )
            })
            .collect())
    }
}

impl<S, T> PathStatistic<[PathBundle]> for (S, T)
where
    S: PathStatistic<[PathBundle]>,
    T: PathStatistic<[PathBundle]>,
{
    type Output = (S::Output, T::Output);

    fn observe(&mut self, obs: &[PathBundle]) {
        self.0.observe(obs);
        self.1.observe(obs);
    }

    fn merge(&mut self, later: Self) {
        self.0.merge(later.0);
        self.1.merge(later.1);
    }

    fn finish(self) -> Self::Output {
        (self.0.finish(), self.1.finish())
    }
}

impl<S, T> PathStatistic<PathBundle> for (S, T)
where
    S: PathStatistic<PathBundle>,
    T: PathStatistic<PathBundle>,
{
    type Output = (S::Output, T::Output);

    fn observe(&mut self, obs: &PathBundle) {
        self.0.observe(obs);
        self.1.observe(obs);
    }

    fn merge(&mut self, later: Self) {
        self.0.merge(later.0);
        self.1.merge(later.1);
    }

    fn finish(self) -> Self::Output {
        (self.0.finish(), self.1.finish())
    }
}

/// Observes one level out of a coupled family.
pub struct AtLevel<S> {
    pub index: usize,
    pub inner: S,
}

impl<S: PathStatistic<PathBundle>> PathStatistic<[PathBundle]> for AtLevel<S> {
    type Output = S::Output;

    fn observe(&mut self, obs: &[PathBundle]) {
        self.inner.observe(&obs[self.index]);
    }

    fn merge(&mut self, later: Self) {
        self.inner.merge(later.inner);
    }

    fn finish(self) -> S::Output {
        self.inner.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brownian(paths: u64) -> Simulator {
        let cfg = SimConfig::new(1.0, 64, paths, 7);
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let model = Model::new(
            Coefficient::constant(0.0).unwrap(),
            Coefficient::constant(1.0).unwrap(),
            one.clone(),
            one,
        );
        Simulator::new(cfg, model).unwrap()
    }

    #[test]
    fn brownian_case_is_the_driving_noise() {
        let sim = brownian(4);
        let b = sim.path(3).unwrap();
        let mut level = 0.0;
        for i in 0..64 {
            level += b.db[i];
            assert_eq!(b.m[i + 1], level);
            assert_eq!(b.x[i + 1], b.m[i + 1]);
            assert_eq!(b.z[i + 1], b.m[i + 1]);
        }
        assert_eq!((b.a[0], b.m[0], b.z[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn deterministic_case_follows_initial_condition() {
        let cfg = SimConfig::new(1.0, 32, 2, 1).with_x0(InitialCondition::Cos);
        let k = KernelSpec::fractional(0.3, 1.0).unwrap();
        let zero = Coefficient::constant(0.0).unwrap();
        let sim = Simulator::new(cfg, Model::new(zero.clone(), zero, k.clone(), k)).unwrap();
        let b = sim.path(0).unwrap();
        for (i, x) in b.x.iter().enumerate() {
            assert_eq!(*x, (i as f64 / 32.0).cos());
        }
    }

    #[test]
    fn paths_do_not_depend_on_neighbours() {
        let sim = brownian(600);
        let ens = sim.simulate().unwrap();
        assert_eq!(ens.bundles.len(), 600);
        for index in [0, 255, 256, 599] {
            assert_eq!(ens.bundles[index as usize], sim.path(index).unwrap());
        }
    }

    #[test]
    fn left_point_is_replaced_for_singular_kernels() {
        let cfg = SimConfig::new(1.0, 16, 1, 1).with_scheme(Scheme::LeftPoint);
        let k = KernelSpec::fractional(0.25, 1.0).unwrap();
        let one = Coefficient::constant(1.0).unwrap();
        let sim = Simulator::new(cfg, Model::new(one.clone(), one, k.clone(), k)).unwrap();
        assert_eq!(sim.scheme(), Scheme::KernelAveraged);
        assert_eq!(sim.log().len(), 1);
    }

    #[test]
    fn weights_agree_between_storage_layouts() {
        let conv = KernelSpec::exponential(1.3, 1.0).unwrap();
        let general = KernelSpec::general("exp-general", 1.0, |s: f64, t: f64| (-1.3 * (t - s)).exp()).unwrap();
        for scheme in [Scheme::LeftPoint, Scheme::KernelAveraged] {
            let a = VolterraWeights::build(&conv, scheme, 1.0, 20).unwrap();
            let b = VolterraWeights::build(&general, scheme, 1.0, 20).unwrap();
            assert!(matches!(a, VolterraWeights::Toeplitz { .. }));
            assert!(matches!(b, VolterraWeights::Dense { .. }));
            for i in 1..=20 {
                for j in 0..i {
                    let (wa, wb) = (a.weight(j, i), b.weight(j, i));
                    assert!((wa - wb).abs() <= 1e-12 * wa.abs(), "{scheme:?} ({j},{i})");
                }
            }
        }
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|k| (k as f64).sin()).collect();
        let b: Vec<f64> = (0..37).map(|k| (k as f64 * 0.3).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-13);
    }

    #[test]
    fn non_finite_paths_are_counted() {
        let cfg = SimConfig::new(1.0, 16, 10, 3);
        let one = KernelSpec::constant(1.0, 1.0).unwrap();
        let blow = Coefficient::new("blow-up", 1.0, |_, x: f64| if x > 0.0 { f64::INFINITY } else { 0.0 }).unwrap();
        let sim = Simulator::new(cfg, Model::new(blow, Coefficient::constant(1.0).unwrap(), one.clone(), one)).unwrap();
        match sim.simulate() {
            Err(Error::TooManyAborted { aborted, total: 10 }) => assert!(aborted > 0),
            other => panic!("expected TooManyAborted, got {other:?}"),
        }
    }
}
