use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use sve_core::coefficients::{default_quadrature_order, mollify_on, verify_mollified_properties, MollifyCheckOptions};
use sve_core::diagnostics::{
    ConvergenceAccumulator, FubiniIdentity, HolderAccumulator, HolderOptions, IbpIdentity, MomentAccumulator,
};
use sve_core::engine::{mollified_sequence, Model, PathBundle, PathStatistic, Simulator};
use sve_core::kernels::{
    check_base_integrability, check_regularity, check_structural, dyadic_pairs, RegularityParams, StructuralClaim,
};
use sve_core::martingale::{
    summarize, Generator, MartingaleAccumulator, MartingaleOptions, MartingaleTestReport, QvAccumulator, QvReport,
    TestFunction,
};
use sve_core::report::{Measurement, Tabular};
use sve_core::stats::{quantile, Moments};

use crate::archive::RunArchive;
use crate::config::{CheckKind, Format, RunConfig};

pub const SCHEMA: &str = "sve-report/1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paths simulated up front to size the default test-function battery.
const PILOT_PATHS: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    ChecksFailed,
}

#[derive(Debug, thiserror::Error)]
#[error("replay mismatch at statistic `{statistic}`: archived {archived:e}, replayed {replayed:e}")]
pub struct Mismatch {
    pub statistic: String,
    pub archived: f64,
    pub replayed: f64,
}

/// Command-line overrides shared by every verb.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
        }
    }

    fn output_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("SVE_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(&cfg.output.directory))
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    format!("{:x}", Sha256::digest(cfg.to_toml().as_bytes()))
}

struct Outputs {
    dir: PathBuf,
    formats: BTreeSet<Format>,
    config_hash: String,
    summary: Vec<serde_json::Value>,
}

impl Outputs {
    fn new(cfg: &RunConfig, overrides: &Overrides) -> Result<Self> {
        let dir = overrides.output_dir(cfg);
        fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        let formats = match overrides.format {
            Some(f) => BTreeSet::from([f]),
            None => cfg.output.formats.iter().copied().collect(),
        };
        Ok(Self {
            dir,
            formats,
            config_hash: config_hash(cfg),
            summary: Vec::new(),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn emit(&mut self, name: &str, certifies: &str, passed: bool, report: &impl Serialize, rows: &[Measurement]) -> Result<()> {
        println!("{name}: {}", if passed { "PASS" } else { "FAIL" });
        self.summary.push(json!({ "check": name, "certifies": certifies, "passed": passed }));
        if self.formats.contains(&Format::Json) {
            let doc = json!({
                "schema": SCHEMA,
                "config_hash": self.config_hash,
                "check": name,
                "certifies": certifies,
                "passed": passed,
                "report": report,
            });
            let path = self.path(&format!("{name}.json"));
            fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        if self.formats.contains(&Format::Csv) {
            write_measurements(&self.path(&format!("{name}.csv")), rows)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<Outcome> {
        let passed = self.summary.iter().all(|s| s["passed"] == true);
        if self.formats.contains(&Format::Json) {
            let doc = json!({
                "schema": SCHEMA,
                "config_hash": self.config_hash,
                "passed": passed,
                "checks": self.summary,
            });
            fs::write(self.path("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        }
        Ok(if passed { Outcome::Passed } else { Outcome::ChecksFailed })
    }
}

/// Writes `quantity,scale,value,stderr` rows.
pub fn write_measurements(path: &Path, rows: &[Measurement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["quantity", "scale", "value", "stderr"])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for m in rows {
        w.write_record([m.quantity.clone(), opt(m.scale), m.value.to_string(), opt(m.stderr)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `path_id,t,X,A,M,Z,dB` rows; `dB` on row `t_i` is `B_{t_{i+1}} - B_{t_i}`
/// and is empty on the last grid point.
pub fn write_ensemble(path: &Path, bundles: &[PathBundle]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["path_id", "t", "X", "A", "M", "Z", "dB"])?;
    for b in bundles {
        for i in 0..b.grid.len() {
            let db = b.db.get(i).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                b.path_index.to_string(),
                b.grid[i].to_string(),
                b.x[i].to_string(),
                b.a[i].to_string(),
                b.m[i].to_string(),
                b.z[i].to_string(),
                db,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Order-exact sums that the archive stores and replay recomputes.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    x: Vec<Moments>,
    a_end: Moments,
    m_end: Moments,
    z_end: Moments,
    db: Moments,
}

impl EnsembleStats {
    pub fn new(steps: usize) -> Self {
        Self {
            x: vec![Moments::default(); steps + 1],
            a_end: Moments::default(),
            m_end: Moments::default(),
            z_end: Moments::default(),
            db: Moments::default(),
        }
    }
}

impl PathStatistic<PathBundle> for EnsembleStats {
    type Output = Vec<(String, f64)>;

    fn observe(&mut self, b: &PathBundle) {
        for (m, x) in self.x.iter_mut().zip(&b.x) {
            m.push(*x);
        }
        let n = b.steps();
        self.a_end.push(b.a[n]);
        self.m_end.push(b.m[n]);
        self.z_end.push(b.z[n]);
        for d in &b.db {
            self.db.push(*d);
        }
    }

    fn merge(&mut self, later: Self) {
        for (m, l) in self.x.iter_mut().zip(&later.x) {
            m.merge(l);
        }
        self.a_end.merge(&later.a_end);
        self.m_end.merge(&later.m_end);
        self.z_end.merge(&later.z_end);
        self.db.merge(&later.db);
    }

    fn finish(self) -> Vec<(String, f64)> {
        let mut out = vec![("paths".to_string(), self.a_end.count as f64)];
        let mut push = |name: &str, m: &Moments| {
            out.push((format!("sum_{name}"), m.sum));
            out.push((format!("sum_sq_{name}"), m.sum_sq));
        };
        for (i, m) in self.x.iter().enumerate() {
            push(&format!("X@{i}"), m);
        }
        push("A@T", &self.a_end);
        push("M@T", &self.m_end);
        push("Z@T", &self.z_end);
        push("dB", &self.db);
        out
    }
}

#[derive(Debug, Clone)]
enum Identity {
    Ibp(Arc<IbpIdentity>),
    Fubini(Arc<FubiniIdentity>),
}

/// Sup-norm identity residual aggregated over paths.
#[derive(Debug, Clone)]
struct ResidualStat {
    identity: Identity,
    residuals: Moments,
    worst: f64,
    worst_path: u64,
}

impl ResidualStat {
    fn new(identity: Identity) -> Self {
        Self {
            identity,
            residuals: Moments::default(),
            worst: 0.0,
            worst_path: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub certifies: String,
    pub paths: u64,
    pub mean_sup_residual: f64,
    pub stderr: f64,
    pub max_sup_residual: f64,
    pub worst_path: u64,
}

impl Tabular for ResidualReport {
    fn rows(&self) -> Vec<Measurement> {
        vec![
            Measurement::new("mean_sup_residual", self.mean_sup_residual).with_stderr(self.stderr),
            Measurement::new("max_sup_residual", self.max_sup_residual),
        ]
    }
}

impl PathStatistic<PathBundle> for ResidualStat {
    type Output = ResidualReport;

    fn observe(&mut self, b: &PathBundle) {
        let r = match &self.identity {
            Identity::Ibp(i) => i.residual(b),
            Identity::Fubini(f) => f.residual(b),
        }
        .unwrap_or(f64::NAN);
        self.residuals.push(r);
        if !(r <= self.worst) {
            self.worst = r;
            self.worst_path = b.path_index;
        }
    }

    fn merge(&mut self, later: Self) {
        self.residuals.merge(&later.residuals);
        if !(later.worst <= self.worst) {
            self.worst = later.worst;
            self.worst_path = later.worst_path;
        }
    }

    fn finish(self) -> ResidualReport {
        let certifies = match self.identity {
            Identity::Ibp(_) => "integration-by-parts-identity",
            Identity::Fubini(_) => "stochastic-fubini-identity",
        };
        ResidualReport {
            certifies: certifies.into(),
            paths: self.residuals.count,
            mean_sup_residual: self.residuals.mean(),
            stderr: self.residuals.stderr(),
            max_sup_residual: self.worst,
            worst_path: self.worst_path,
        }
    }
}

/// Everything observed during a single pass over the paths.
#[derive(Clone)]
struct RunObserver {
    stats: EnsembleStats,
    keep: u64,
    sample: Vec<PathBundle>,
    martingale: Option<MartingaleAccumulator>,
    qv: Option<QvAccumulator>,
    holder: Option<HolderAccumulator>,
    moments: Option<MomentAccumulator>,
    ibp: Option<ResidualStat>,
    fubini: Option<ResidualStat>,
}

struct RunResults {
    stats: Vec<(String, f64)>,
    sample: Vec<PathBundle>,
    martingale: Option<sve_core::Result<Vec<MartingaleTestReport>>>,
    qv: Option<QvReport>,
    holder: Option<sve_core::diagnostics::HolderReport>,
    moments: Option<sve_core::diagnostics::MomentReport>,
    ibp: Option<ResidualReport>,
    fubini: Option<ResidualReport>,
}

fn observe_opt<S: PathStatistic<PathBundle>>(s: &mut Option<S>, b: &PathBundle) {
    if let Some(s) = s {
        s.observe(b);
    }
}

fn merge_opt<S: PathStatistic<PathBundle>>(s: &mut Option<S>, later: Option<S>) {
    if let (Some(s), Some(l)) = (s, later) {
        s.merge(l);
    }
}

impl PathStatistic<PathBundle> for RunObserver {
    type Output = RunResults;

    fn observe(&mut self, b: &PathBundle) {
        self.stats.observe(b);
        if b.path_index < self.keep {
            self.sample.push(b.clone());
        }
        observe_opt(&mut self.martingale, b);
        observe_opt(&mut self.qv, b);
        observe_opt(&mut self.holder, b);
        observe_opt(&mut self.moments, b);
        observe_opt(&mut self.ibp, b);
        observe_opt(&mut self.fubini, b);
    }

    fn merge(&mut self, later: Self) {
        self.stats.merge(later.stats);
        self.sample.extend(later.sample);
        merge_opt(&mut self.martingale, later.martingale);
        merge_opt(&mut self.qv, later.qv);
        merge_opt(&mut self.holder, later.holder);
        merge_opt(&mut self.moments, later.moments);
        merge_opt(&mut self.ibp, later.ibp);
        merge_opt(&mut self.fubini, later.fubini);
    }

    fn finish(self) -> RunResults {
        RunResults {
            stats: self.stats.finish(),
            sample: self.sample,
            martingale: self.martingale.map(PathStatistic::finish),
            qv: self.qv.map(PathStatistic::finish),
            holder: self.holder.map(PathStatistic::finish),
            moments: self.moments.map(PathStatistic::finish),
            ibp: self.ibp.map(PathStatistic::finish),
            fubini: self.fubini.map(PathStatistic::finish),
        }
    }
}

/// Default battery sized from the spread of `Z_T` over a pilot run.
fn pilot_battery(sim: &Simulator) -> Result<Vec<TestFunction>> {
    let count = sim.config().paths.min(PILOT_PATHS);
    let mut bundle = sim.new_bundle();
    let mut z = Vec::with_capacity(count as usize);
    for i in 0..count {
        if sim.path_into(i, &mut bundle).is_ok() {
            z.extend_from_slice(&bundle.z);
        }
    }
    let (lo, hi) = (quantile(&z, 0.01).min(0.0), quantile(&z, 0.99).max(0.0));
    Ok(TestFunction::default_battery(lo, hi)?)
}

struct KernelOutcome {
    passed: bool,
    integrable: bool,
}

fn kernel_checks(cfg: &RunConfig, model: &Model, out: &mut Outputs) -> Result<KernelOutcome> {
    let horizon = cfg.sim.horizon;
    let grid: Vec<f64> = (1..=32).map(|k| horizon * k as f64 / 32.0).collect();
    let integrability = check_base_integrability(&model.k_mu, &model.k_sigma, &grid)?;
    let integrable = integrability.passed;
    let mut passed = integrability.passed;
    let mut rows: Vec<Measurement> = Vec::new();
    let mut prefixed = |prefix: &str, r: &dyn Tabular| {
        rows.extend(r.rows().into_iter().map(|mut m| {
            m.quantity = format!("{prefix}.{}", m.quantity);
            m
        }))
    };
    prefixed("integrability", &integrability);
    let mut doc = serde_json::Map::new();
    doc.insert("integrability".into(), serde_json::to_value(&integrability)?);
    if integrable {
        if let (Some(p), Some(gamma)) = (cfg.checks.p, cfg.checks.gamma) {
            let params = RegularityParams::new(p, gamma).context("checks.gamma")?;
            let pairs = dyadic_pairs(horizon, &[0.25 * horizon, 0.5 * horizon], 3..=14);
            let regularity = check_regularity(&model.k_mu, &model.k_sigma, &params, &pairs)?;
            passed &= regularity.passed;
            prefixed("regularity", &regularity);
            doc.insert("regularity".into(), serde_json::to_value(&regularity)?);
        }
        let structural = check_structural(&model.k_mu, &model.k_sigma, cfg.checks.p_struct, StructuralClaim::Detect)?;
        passed &= structural.passed;
        prefixed("structural", &structural);
        doc.insert("structural".into(), serde_json::to_value(&structural)?);
    }
    out.emit(CheckKind::KernelAssumptions.name(), "kernel-assumptions", passed, &doc, &rows)?;
    Ok(KernelOutcome { passed, integrable })
}

fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

/// Streams the ensemble once with every requested observer attached.
fn simulate_and_check(cfg: &RunConfig, sim: &Simulator, keep: u64) -> Result<RunResults> {
    let steps = cfg.sim.steps;
    let model = sim.model();
    let x0 = cfg.x0()?;
    let martingale = if cfg.requests(CheckKind::Martingale) {
        let functions = match cfg.explicit_battery() {
            Some(b) => b,
            None => pilot_battery(sim)?,
        };
        let opts = MartingaleOptions {
            generator: Generator::with_diffusion_weight(cfg.checks.generator_weight),
            ..MartingaleOptions::default()
        };
        Some(MartingaleAccumulator::new(&model.mu, &model.sigma, &functions, steps, &opts)?)
    } else {
        None
    };
    let holder = if cfg.requests(CheckKind::Holder) {
        let opts = HolderOptions {
            gamma: cfg.checks.gamma,
            ..HolderOptions::default()
        };
        Some(HolderAccumulator::new(cfg.checks.holder_p, &x0, cfg.sim.horizon, steps, &opts)?)
    } else {
        None
    };
    let ibp = if cfg.requests(CheckKind::Ibp) {
        let id = IbpIdentity::new(&x0, &model.k_mu, &model.k_sigma, &model.mu, sim.scheme(), cfg.sim.horizon, steps)
            .context("preparing the integration-by-parts identity")?;
        Some(ResidualStat::new(Identity::Ibp(Arc::new(id))))
    } else {
        None
    };
    let fubini = if cfg.requests(CheckKind::Fubini) {
        let id = FubiniIdentity::new(&x0, &model.k_mu, &model.k_sigma, cfg.sim.horizon, steps)
            .context("preparing the stochastic Fubini identity")?;
        Some(ResidualStat::new(Identity::Fubini(Arc::new(id))))
    } else {
        None
    };
    let template = RunObserver {
        stats: EnsembleStats::new(steps),
        keep,
        sample: Vec::new(),
        martingale,
        qv: cfg
            .requests(CheckKind::Qv)
            .then(|| QvAccumulator::new(&model.sigma, steps)),
        holder,
        moments: if cfg.requests(CheckKind::Moments) {
            Some(MomentAccumulator::new(cfg.checks.q, cfg.sim.horizon, steps)?)
        } else {
            None
        },
        ibp,
        fubini,
    };
    let outcome = sim.run(|| template.clone()).context("simulating the ensemble")?;
    if !outcome.aborted.is_empty() {
        eprintln!("note: {} paths aborted on non-finite states", outcome.aborted.len());
    }
    Ok(outcome.value)
}

/// `sve run`
pub fn run(config: &Path, overrides: &Overrides) -> Result<Outcome> {
    let cfg = load(config, overrides)?;
    let model = cfg.model()?;
    let mut out = Outputs::new(&cfg, overrides)?;
    if cfg.requests(CheckKind::KernelAssumptions) {
        let k = kernel_checks(&cfg, &model, &mut out)?;
        if !k.integrable {
            eprintln!("kernel integrability fails; skipping simulation");
            return out.finish();
        }
        let _ = k.passed;
    }
    let sim = Simulator::new(cfg.sim_config()?, model.clone()).context("building the simulator")?;
    for line in sim.log() {
        eprintln!("note: {line}");
    }
    let results = simulate_and_check(&cfg, &sim, cfg.output.ensemble_paths)?;

    RunArchive {
        tool_version: TOOL_VERSION.into(),
        config: cfg.to_toml(),
        seed: cfg.sim.seed,
        statistics: results.stats,
    }
    .write(&out.path("run.svearch"))?;
    if out.formats.contains(&Format::Csv) {
        let mut sample = results.sample;
        sample.sort_by_key(|b| b.path_index);
        write_ensemble(&out.path("ensemble.csv"), &sample)?;
    }

    if let Some(reports) = results.martingale {
        let reports = reports?;
        let summary = summarize(&reports);
        let rows: Vec<Measurement> = reports.iter().flat_map(Tabular::rows).collect();
        let doc = json!({ "summary": summary, "functions": reports });
        out.emit("martingale", &summary.certifies, summary.passed, &doc, &rows)?;
    }
    if let Some(qv) = results.qv {
        out.emit("qv", &qv.certifies, qv.passed, &qv, &qv.rows())?;
    }
    if let Some(h) = results.holder {
        out.emit("holder", &h.certifies, h.passed, &h, &h.rows())?;
    }
    if let Some(m) = results.moments {
        let finite = m.value.is_finite();
        out.emit("moments", &m.certifies, finite, &m, &m.rows())?;
    }
    for (name, r) in [("ibp", results.ibp), ("fubini", results.fubini)] {
        if let Some(r) = r {
            let passed = r.max_sup_residual.is_finite();
            out.emit(name, &r.certifies, passed, &r, &r.rows())?;
        }
    }
    if cfg.requests(CheckKind::Converge) {
        let probe = cfg.checks.probe_time.unwrap_or(cfg.sim.horizon);
        let seq = mollified_sequence(cfg.sim_config()?, model, &cfg.checks.levels)?;
        let acc = ConvergenceAccumulator::new(&cfg.checks.levels, probe, cfg.sim.horizon, cfg.sim.steps)?;
        let report = seq.run(|| acc.empty()).context("simulating the mollified sequence")?.value;
        out.emit("converge", &report.certifies, report.monotone, &report, &report.rows())?;
    }
    out.finish()
}

/// `sve replay`
pub fn replay(archive: &Path, overrides: &Overrides) -> Result<Outcome> {
    let stored = RunArchive::read(archive)?;
    if stored.tool_version != TOOL_VERSION {
        eprintln!("note: archive written by version {}, replaying with {TOOL_VERSION}", stored.tool_version);
    }
    let mut cfg = RunConfig::from_toml(&stored.config)
        .map_err(|e| crate::archive::ArchiveError::Corrupt(format!("embedded config is invalid: {e}")))?;
    cfg.sim.seed = stored.seed;
    overrides.apply(&mut cfg);
    let sim = Simulator::new(cfg.sim_config()?, cfg.model()?)?;
    let replayed = sim.run(|| EnsembleStats::new(cfg.sim.steps))?.value;
    if replayed.len() != stored.statistics.len() {
        return Err(Mismatch {
            statistic: "statistic count".into(),
            archived: stored.statistics.len() as f64,
            replayed: replayed.len() as f64,
        }
        .into());
    }
    for ((name, a), (_, b)) in stored.statistics.iter().zip(&replayed) {
        if a.to_bits() != b.to_bits() {
            return Err(Mismatch {
                statistic: name.clone(),
                archived: *a,
                replayed: *b,
            }
            .into());
        }
    }
    println!("replay: {} statistics match bitwise", replayed.len());
    Ok(Outcome::Passed)
}

/// `sve check-kernel`
pub fn check_kernel(config: &Path, overrides: &Overrides) -> Result<Outcome> {
    let cfg = load(config, overrides)?;
    if let Some(p) = cfg.checks.p {
        if !(p > 4.0) {
            return Err(crate::config::ConfigError {
                key: "checks.p".into(),
                message: format!("p must exceed 4, got {p}"),
            }
            .into());
        }
    }
    let model = cfg.model()?;
    let mut out = Outputs::new(&cfg, overrides)?;
    kernel_checks(&cfg, &model, &mut out)?;
    out.finish()
}

/// `sve mollify-demo`
pub fn mollify_demo(config: &Path, overrides: &Overrides) -> Result<Outcome> {
    let cfg = load(config, overrides)?;
    let model = cfg.model()?;
    let mut out = Outputs::new(&cfg, overrides)?;
    let horizon = cfg.sim.horizon;
    let r = cfg.checks.radius;
    let opts = MollifyCheckOptions {
        horizon,
        ..MollifyCheckOptions::default()
    };
    for (name, f) in [("mu", &model.mu), ("sigma", &model.sigma)] {
        let report = verify_mollified_properties(f, &cfg.checks.levels, r, &opts);
        out.emit(&format!("mollify-{name}"), &report.certifies, report.passed, &report, &report.rows())?;
        if out.formats.contains(&Format::Csv) {
            write_mollified_table(&out.path(&format!("mollify-{name}-table.csv")), f, &cfg.checks.levels, r, horizon)?;
        }
    }
    out.finish()
}

/// `coefficient,level,t,x,value` at `t = T/2`; level 0 is the raw coefficient.
fn write_mollified_table(
    path: &Path,
    f: &sve_core::coefficients::Coefficient,
    levels: &[u32],
    r: f64,
    horizon: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["coefficient", "level", "t", "x", "value"])?;
    let t = 0.5 * horizon;
    let xs: Vec<f64> = (0..=200).map(|k| -(r + 1.0) + 2.0 * (r + 1.0) * k as f64 / 200.0).collect();
    let mut rows = |level: u32, eval: &dyn Fn(f64) -> f64| -> Result<()> {
        for &x in &xs {
            w.write_record([f.label().to_string(), level.to_string(), t.to_string(), x.to_string(), eval(x).to_string()])?;
        }
        Ok(())
    };
    rows(0, &|x| f.eval(t, x))?;
    for &n in levels {
        let m = mollify_on(f, n, default_quadrature_order(n), horizon)?;
        rows(n, &|x| m.eval(t, x))?;
    }
    w.flush()?;
    Ok(())
}
