//! TOML run configuration.
//!
//! ```toml
//! [model]
//! x0 = 1.0                          # number, "cos", or { a = .., b = .. } for a + b t
//! mu = "linear{a=1, b=-1}"
//! sigma = "sqrt_abs"
//! k_mu = "constant"
//! k_sigma = "fractional{alpha=0.25}"
//!
//! [sim]
//! T = 1.0
//! N = 1024
//! paths = 10000
//! seed = 7
//! scheme = "kernel_averaged"        # or "left_point"
//!
//! [checks]
//! run = ["martingale", "qv", "holder"]
//!
//! [output]
//! directory = "out"
//! formats = ["json", "csv"]
//! ```
//!
//! Families are written either as `name{key=value, ...}` strings or as
//! inline tables with a `family` key, which also admits array parameters:
//! `k_sigma = { family = "lipschitz_profile", knots = [0, 1], values = [1, 0] }`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sve_core::coefficients::Coefficient;
use sve_core::engine::{InitialCondition, Model, Scheme, SimConfig};
use sve_core::kernels::KernelSpec;
use sve_core::martingale::TestFunction;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("config error at `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            key: key.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    KernelAssumptions,
    Martingale,
    Qv,
    Holder,
    Moments,
    Ibp,
    Fubini,
    Converge,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::KernelAssumptions => "kernel-assumptions",
            Self::Martingale => "martingale",
            Self::Qv => "qv",
            Self::Holder => "holder",
            Self::Moments => "moments",
            Self::Ibp => "ibp",
            Self::Fubini => "fubini",
            Self::Converge => "converge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sim: SimSection,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "zero_value")]
    pub x0: toml::Value,
    pub mu: toml::Value,
    pub sigma: toml::Value,
    pub k_mu: toml::Value,
    pub k_sigma: toml::Value,
}

fn zero_value() -> toml::Value {
    toml::Value::Float(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(alias = "Mc")]
    pub paths: u64,
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_scheme() -> Scheme {
    Scheme::KernelAveraged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub run: Vec<CheckKind>,
    /// Regularity exponent pair for the kernel assumptions.
    pub p: Option<f64>,
    pub gamma: Option<f64>,
    /// Exponent for the structural derivative bound.
    pub p_struct: f64,
    /// Moment order for `moments`.
    pub q: f64,
    /// Moment order for `holder`.
    pub holder_p: f64,
    /// Mollification levels for `converge` and `mollify-demo`.
    pub levels: Vec<u32>,
    /// Explicit test functions; the default battery is sized from a pilot run.
    pub battery: Option<Vec<BumpSpec>>,
    /// Weight of the second-order term in the generator.
    pub generator_weight: f64,
    pub probe_time: Option<f64>,
    /// Half-width of the `x` window for `mollify-demo`.
    pub radius: f64,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            run: Vec::new(),
            p: None,
            gamma: None,
            p_struct: 2.0,
            q: 2.0,
            holder_p: 2.0,
            levels: vec![2, 4, 8, 16],
            battery: None,
            generator_weight: 0.5,
            probe_time: None,
            radius: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<Format>,
    /// Number of leading paths written to `ensemble.csv`.
    pub ensemble_paths: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "sve-out".into(),
            formats: vec![Format::Json, Format::Csv],
            ensemble_paths: 8,
        }
    }
}

/// A family name with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub key: String,
    pub name: String,
    pub params: BTreeMap<String, toml::Value>,
}

impl Family {
    pub fn parse(key: &str, value: &toml::Value) -> Result<Self, ConfigError> {
        match value {
            toml::Value::String(s) => Self::parse_str(key, s),
            toml::Value::Integer(_) | toml::Value::Float(_) => Ok(Self {
                key: key.into(),
                name: "constant".into(),
                params: BTreeMap::from([("c".to_string(), value.clone())]),
            }),
            toml::Value::Table(t) => {
                let name = t
                    .get("family")
                    .and_then(toml::Value::as_str)
                    .ok_or_else(|| ConfigError::new(format!("{key}.family"), "missing family name"))?;
                let params = t
                    .iter()
                    .filter(|(k, _)| k.as_str() != "family")
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                Ok(Self {
                    key: key.into(),
                    name: name.into(),
                    params,
                })
            }
            _ => Err(ConfigError::new(key, "expected a family string, a number or a table")),
        }
    }

    fn parse_str(key: &str, s: &str) -> Result<Self, ConfigError> {
        let s = s.trim();
        let (name, body) = match s.find('{') {
            None => (s, ""),
            Some(open) => {
                let body = s[open + 1..]
                    .strip_suffix('}')
                    .ok_or_else(|| ConfigError::new(key, format!("unbalanced braces in `{s}`")))?;
                (&s[..open], body)
            }
        };
        let mut params = BTreeMap::new();
        for item in body.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::new(key, format!("expected key=value, got `{item}`")))?;
            let k = k.trim();
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::new(format!("{key}.{k}"), format!("`{}` is not a number", v.trim())))?;
            params.insert(k.to_string(), toml::Value::Float(v));
        }
        Ok(Self {
            key: key.into(),
            name: name.trim().into(),
            params,
        })
    }

    fn path(&self, param: &str) -> String {
        format!("{}.{param}", self.key)
    }

    fn number(&self, param: &str, default: Option<f64>) -> Result<f64, ConfigError> {
        match self.params.get(param) {
            Some(v) => as_number(v).ok_or_else(|| ConfigError::new(self.path(param), "expected a number")),
            None => default.ok_or_else(|| ConfigError::new(self.path(param), "missing parameter")),
        }
    }

    fn numbers(&self, param: &str) -> Result<Vec<f64>, ConfigError> {
        let arr = self
            .params
            .get(param)
            .ok_or_else(|| ConfigError::new(self.path(param), "missing parameter"))?
            .as_array()
            .ok_or_else(|| ConfigError::new(self.path(param), "expected an array of numbers"))?;
        arr.iter()
            .map(|v| as_number(v).ok_or_else(|| ConfigError::new(self.path(param), "expected an array of numbers")))
            .collect()
    }

    fn expect_only(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::new(
                self.path(k),
                format!("unknown parameter for family `{}`", self.name),
            )),
            None => Ok(()),
        }
    }

    pub fn coefficient(&self) -> Result<Coefficient, ConfigError> {
        let core = |e: sve_core::Error| ConfigError::new(self.key.clone(), e);
        let c = match self.name.as_str() {
            "constant" => {
                self.expect_only(&["c"])?;
                Coefficient::constant(self.number("c", None)?).map_err(core)?
            }
            "linear" => {
                self.expect_only(&["a", "b"])?;
                Coefficient::linear(self.number("a", Some(0.0))?, self.number("b", Some(0.0))?).map_err(core)?
            }
            "sqrt_abs" => {
                self.expect_only(&[])?;
                Coefficient::sqrt_abs()
            }
            "cir_drift" => {
                self.expect_only(&["kappa", "theta"])?;
                Coefficient::cir_drift(self.number("kappa", None)?, self.number("theta", None)?).map_err(core)?
            }
            "sin_tx" => {
                self.expect_only(&[])?;
                Coefficient::sin_tx()
            }
            "table" => {
                self.expect_only(&["knots", "values"])?;
                Coefficient::table(&self.numbers("knots")?, &self.numbers("values")?).map_err(core)?
            }
            other => return Err(ConfigError::new(self.key.clone(), format!("unknown coefficient family `{other}`"))),
        };
        Ok(c)
    }

    pub fn kernel(&self, horizon: f64) -> Result<KernelSpec, ConfigError> {
        let core = |e: sve_core::Error| ConfigError::new(self.key.clone(), e);
        match self.name.as_str() {
            "constant" => {
                self.expect_only(&["c"])?;
                KernelSpec::constant(self.number("c", Some(1.0))?, horizon).map_err(core)
            }
            "fractional" => {
                self.expect_only(&["alpha"])?;
                let alpha = self.number("alpha", None)?;
                if !(0.0..1.0).contains(&alpha) {
                    return Err(ConfigError::new(self.path("alpha"), format!("alpha must lie in [0, 1), got {alpha}")));
                }
                KernelSpec::fractional(alpha, horizon).map_err(core)
            }
            "exponential" => {
                self.expect_only(&["lambda"])?;
                KernelSpec::exponential(self.number("lambda", None)?, horizon).map_err(core)
            }
            "lipschitz_profile" => {
                self.expect_only(&["knots", "values"])?;
                KernelSpec::lipschitz_profile(&self.numbers("knots")?, &self.numbers("values")?, horizon).map_err(core)
            }
            other => Err(ConfigError::new(self.key.clone(), format!("unknown kernel family `{other}`"))),
        }
    }
}

fn as_number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn initial_condition(v: &toml::Value) -> Result<InitialCondition, ConfigError> {
    let key = "model.x0";
    if let Some(c) = as_number(v) {
        return Ok(InitialCondition::Constant(c));
    }
    match v {
        toml::Value::String(s) if s == "cos" => Ok(InitialCondition::Cos),
        toml::Value::Table(t) => {
            let get = |k: &str| {
                t.get(k)
                    .map(|v| as_number(v).ok_or_else(|| ConfigError::new(format!("{key}.{k}"), "expected a number")))
                    .unwrap_or(Ok(0.0))
            };
            if let Some(k) = t.keys().find(|k| !matches!(k.as_str(), "a" | "b")) {
                return Err(ConfigError::new(format!("{key}.{k}"), "unknown parameter"));
            }
            Ok(InitialCondition::Linear { a: get("a")?, b: get("b")? })
        }
        _ => Err(ConfigError::new(key, "expected a number, \"cos\" or { a, b }")),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = message
                .split('`')
                .nth(1)
                .filter(|_| message.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            ConfigError::new(key, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn requests(&self, kind: CheckKind) -> bool {
        self.checks.run.contains(&kind)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sim = &self.sim;
        if !(sim.horizon > 0.0 && sim.horizon.is_finite()) {
            return Err(ConfigError::new("sim.T", "must be positive"));
        }
        if sim.steps < 2 {
            return Err(ConfigError::new("sim.N", "must be at least 2"));
        }
        if sim.paths < 1 {
            return Err(ConfigError::new("sim.paths", "must be at least 1"));
        }
        let checks = &self.checks;
        if let Some(p) = checks.p {
            if self.requests(CheckKind::KernelAssumptions) && !(p > 4.0) {
                return Err(ConfigError::new("checks.p", format!("p must exceed 4, got {p}")));
            }
        }
        if checks.gamma.is_some() && checks.p.is_none() {
            return Err(ConfigError::new("checks.gamma", "gamma requires p"));
        }
        if checks.levels.is_empty() || checks.levels.windows(2).any(|w| w[1] <= w[0]) || checks.levels[0] == 0 {
            return Err(ConfigError::new("checks.levels", "levels must be positive and strictly increasing"));
        }
        if !(checks.q >= 1.0) {
            return Err(ConfigError::new("checks.q", "moment order must be at least 1"));
        }
        if !(checks.holder_p > 0.0) {
            return Err(ConfigError::new("checks.holder_p", "must be positive"));
        }
        if !(checks.radius > 0.0) {
            return Err(ConfigError::new("checks.radius", "must be positive"));
        }
        if let Some(t) = checks.probe_time {
            if !(0.0..=sim.horizon).contains(&t) {
                return Err(ConfigError::new("checks.probe_time", "must lie in [0, T]"));
            }
        }
        if let Some(battery) = &checks.battery {
            for (i, b) in battery.iter().enumerate() {
                TestFunction::bump(b.center, b.half_width)
                    .map_err(|e| ConfigError::new(format!("checks.battery[{i}]"), e))?;
            }
        }
        self.model()?;
        self.x0()?;
        Ok(())
    }

    pub fn x0(&self) -> Result<InitialCondition, ConfigError> {
        initial_condition(&self.model.x0)
    }

    pub fn model(&self) -> Result<Model, ConfigError> {
        let m = &self.model;
        let t = self.sim.horizon;
        Ok(Model::new(
            Family::parse("model.mu", &m.mu)?.coefficient()?,
            Family::parse("model.sigma", &m.sigma)?.coefficient()?,
            Family::parse("model.k_mu", &m.k_mu)?.kernel(t)?,
            Family::parse("model.k_sigma", &m.k_sigma)?.kernel(t)?,
        ))
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let s = &self.sim;
        Ok(SimConfig::new(s.horizon, s.steps, s.paths, s.seed)
            .with_scheme(s.scheme)
            .with_x0(self.x0()?))
    }

    pub fn explicit_battery(&self) -> Option<Vec<TestFunction>> {
        self.checks.battery.as_ref().map(|b| {
            b.iter()
                .map(|s| TestFunction::bump(s.center, s.half_width).expect("validated"))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
x0 = 1.0
mu = "linear{a=1, b=-1}"
sigma = "sqrt_abs"
k_mu = "constant"
k_sigma = "fractional{alpha=0.25}"

[sim]
T = 1.0
N = 64
paths = 100
seed = 3
"#;

    #[test]
    fn parses_family_strings_and_tables() {
        let f = Family::parse("k", &toml::Value::String("exponential{lambda=2}".into())).unwrap();
        assert_eq!(f.name, "exponential");
        assert_eq!(f.number("lambda", None).unwrap(), 2.0);
        let cfg = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.sim.scheme, Scheme::KernelAveraged);
        let tabled = BASE.replace(
            "k_sigma = \"fractional{alpha=0.25}\"",
            "k_sigma = { family = \"lipschitz_profile\", knots = [0.0, 1.0], values = [1.0, 0.5] }",
        );
        RunConfig::from_toml(&tabled).unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let bad = BASE.replace("alpha=0.25", "alpha=1.5");
        assert_eq!(RunConfig::from_toml(&bad).unwrap_err().key, "model.k_sigma.alpha");
        let bad = BASE.replace("N = 64", "N = 1");
        assert_eq!(RunConfig::from_toml(&bad).unwrap_err().key, "sim.N");
        let bad = BASE.replace("sqrt_abs", "cube");
        assert_eq!(RunConfig::from_toml(&bad).unwrap_err().key, "model.sigma");
        let bad = BASE.replace("seed = 3", "");
        let err = RunConfig::from_toml(&bad).unwrap_err();
        assert_eq!(err.key, "seed", "{err}");
    }

    #[test]
    fn regularity_exponent_must_exceed_four() {
        let text = format!("{BASE}\n[checks]\nrun = [\"kernel-assumptions\"]\np = 3.0\ngamma = 0.1\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.key, "checks.p");
        assert!(err.message.contains("p must exceed 4"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
