//! Structured check results shared by every verifier in the crate.

use std::collections::BTreeMap;

use serde::Serialize;

/// One measured quantity. `scale` is the abscissa it was measured at
/// (a time, a gap, a level, ...), when there is one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub quantity: String,
    pub scale: Option<f64>,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl Measurement {
    pub fn new(quantity: impl Into<String>, value: f64) -> Self {
        Self {
            quantity: quantity.into(),
            scale: None,
            value,
            stderr: None,
        }
    }

    pub fn at(mut self, scale: f64) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn with_stderr(mut self, stderr: f64) -> Self {
        self.stderr = Some(stderr);
        self
    }
}

/// Anything that can be flattened to `(quantity, scale, value, stderr)` rows.
pub trait Tabular {
    fn rows(&self) -> Vec<Measurement>;
}

/// Generic pass/fail result with the measurements that decided it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    /// Identifier of the hypothesis or identity this report certifies.
    pub certifies: String,
    pub passed: bool,
    pub measurements: Vec<Measurement>,
    pub tolerances: BTreeMap<String, f64>,
    /// Coordinates of the worst observed point, if any.
    pub witness: Option<BTreeMap<String, f64>>,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn new(certifies: impl Into<String>) -> Self {
        Self {
            certifies: certifies.into(),
            passed: true,
            measurements: Vec::new(),
            tolerances: BTreeMap::new(),
            witness: None,
            notes: Vec::new(),
        }
    }

    pub fn measure(&mut self, m: Measurement) {
        self.measurements.push(m);
    }

    pub fn fail(&mut self, note: impl Into<String>) {
        self.passed = false;
        self.notes.push(note.into());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn value(&self, quantity: &str) -> Option<f64> {
        self.measurements
            .iter()
            .find(|m| m.quantity == quantity)
            .map(|m| m.value)
    }
}

impl Tabular for CheckReport {
    fn rows(&self) -> Vec<Measurement> {
        self.measurements.clone()
    }
}

pub(crate) fn witness<const N: usize>(coords: [(&str, f64); N]) -> BTreeMap<String, f64> {
    coords.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}
