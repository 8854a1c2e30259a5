//! Quadrature primitives shared by the kernel and coefficient modules.
//!
//! Two tools live here:
//!
//! * an adaptive Gauss–Kronrod (7/15) integrator that never evaluates the
//!   integrand at an interval endpoint, so it is safe next to a kernel
//!   singularity;
//! * a graded change of variables `u = L v^g` that removes a power-law
//!   endpoint singularity `u^{-e}` before the adaptive rule sees it. With
//!   `g = 2 / (1 - e)` the transformed integrand behaves like `v^1`.
//!
//! Symmetric Gauss–Legendre rules on `[-1, 1]` (used by the mollifier) are
//! built from the `gauss-quad` nodes and mirrored so that `y` and `-y` carry
//! bit-identical weights.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Tolerances and budget for adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Number of equal pieces the domain is split into before adapting.
    pub initial_cells: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-15,
            max_subdivisions: 4000,
            initial_cells: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    abs_value: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Piece {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    let mut abs_value = WGK[7] * fc.abs();
    for (k, (&x, &w)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        kronrod += w * (f1 + f2);
        abs_value += w * (f1.abs() + f2.abs());
        if k % 2 == 1 {
            gauss += WG[k / 2] * (f1 + f2);
        }
    }
    Piece {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
        abs_value: abs_value * half.abs(),
    }
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// Returns `(value, error_estimate)`. Endpoints are never evaluated.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    opts: &QuadratureOptions,
) -> Result<(f64, f64)> {
    if a == b {
        return Ok((0.0, 0.0));
    }
    let cells = opts.initial_cells.max(1);
    let width = (b - a) / cells as f64;
    let mut heap = BinaryHeap::with_capacity(cells + opts.max_subdivisions);
    for c in 0..cells {
        let lo = a + width * c as f64;
        let hi = if c + 1 == cells { b } else { a + width * (c + 1) as f64 };
        heap.push(kronrod15(&f, lo, hi));
    }
    let mut subdivisions = 0;
    loop {
        let (value, error, abs_value) = heap.iter().fold((0.0, 0.0, 0.0), |acc, p| {
            (acc.0 + p.value, acc.1 + p.error, acc.2 + p.abs_value)
        });
        if !value.is_finite() || !error.is_finite() {
            return Err(Error::Quadrature {
                a,
                b,
                estimate: error,
                subdivisions,
            });
        }
        let target = opts
            .abs_tol
            .max(opts.rel_tol * value.abs())
            .max(50.0 * f64::EPSILON * abs_value);
        if error <= target {
            return Ok((value, error));
        }
        if subdivisions >= opts.max_subdivisions {
            return Err(Error::Quadrature {
                a,
                b,
                estimate: error,
                subdivisions,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a.min(worst.b) || mid >= worst.a.max(worst.b) {
            // interval can no longer be split in floating point
            return Err(Error::Quadrature {
                a,
                b,
                estimate: error,
                subdivisions,
            });
        }
        heap.push(kronrod15(&f, worst.a, mid));
        heap.push(kronrod15(&f, mid, worst.b));
        subdivisions += 1;
    }
}

/// Integrates `f` over the gap range `[near, far]` (with `0 <= near <= far`)
/// where `f(u)` may blow up like `u^{-exponent}` as `u → 0`. Requires
/// `exponent < 1`; a non-positive exponent means the integrand is regular.
pub fn integrate_graded<F: Fn(f64) -> f64>(
    near: f64,
    far: f64,
    exponent: f64,
    f: F,
    opts: &QuadratureOptions,
) -> Result<f64> {
    debug_assert!(0.0 <= near && near <= far);
    if near == far {
        return Ok(0.0);
    }
    if exponent <= 0.0 {
        return integrate(f, near, far, opts).map(|(v, _)| v);
    }
    debug_assert!(exponent < 1.0);
    let grading = 2.0 / (1.0 - exponent);
    let v_lo = if near == 0.0 {
        0.0
    } else {
        (near / far).powf(1.0 / grading)
    };
    let transformed = |v: f64| {
        let u = far * v.powf(grading);
        f(u) * grading * far * v.powf(grading - 1.0)
    };
    integrate(transformed, v_lo, 1.0, opts).map(|(v, _)| v)
}

/// Gauss–Legendre rule on `[-1, 1]` stored as mirrored pairs.
#[derive(Debug, Clone)]
pub struct SymmetricRule {
    /// Strictly positive nodes with their weights.
    pairs: Vec<(f64, f64)>,
    /// Weight of the node at zero (odd orders only).
    center: Option<f64>,
}

impl SymmetricRule {
    pub fn new(order: usize) -> Self {
        let order = NonZeroUsize::new(order.max(1)).expect("order >= 1");
        let rule = GaussLegendre::new(order);
        let mut positive: Vec<(f64, f64)> = Vec::new();
        let mut negative: Vec<(f64, f64)> = Vec::new();
        let mut center = None;
        for &(x, w) in rule.as_node_weight_pairs() {
            if order.get() % 2 == 1 && x.abs() < 1e-14 {
                center = Some(w);
            } else if x > 0.0 {
                positive.push((x, w));
            } else {
                negative.push((-x, w));
            }
        }
        positive.sort_by(|l, r| l.0.total_cmp(&r.0));
        negative.sort_by(|l, r| l.0.total_cmp(&r.0));
        let pairs = positive
            .iter()
            .zip(&negative)
            .map(|(p, n)| (0.5 * (p.0 + n.0), 0.5 * (p.1 + n.1)))
            .collect();
        Self { pairs, center }
    }

    pub fn order(&self) -> usize {
        2 * self.pairs.len() + usize::from(self.center.is_some())
    }

    /// Positive nodes and weights; each node `y` stands for the pair `±y`.
    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn center_weight(&self) -> Option<f64> {
        self.center
    }

    /// `∫_{-1}^{1} f(y) dy` evaluated pairwise as `w (f(y) + f(-y))`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let mut sum = self.center.map_or(0.0, |w| w * f(0.0));
        for &(y, w) in &self.pairs {
            sum += w * (f(y) + f(-y));
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kronrod_is_exact_for_polynomials() {
        let (v, _) = integrate(|x| x.powi(9) + 3.0 * x * x, 0.0, 2.0, &Default::default()).unwrap();
        assert_relative_eq!(v, 102.4 + 8.0, max_relative = 1e-13);
    }

    #[test]
    fn adaptive_handles_kink() {
        let (v, _) = integrate(|x: f64| (x - 0.3).abs(), 0.0, 1.0, &Default::default()).unwrap();
        assert_relative_eq!(v, 0.5 * (0.09 + 0.49), max_relative = 1e-10);
    }

    #[test]
    fn graded_substitution_removes_power_singularity() {
        // ∫_0^1 (1 - s)^{-0.75} ds = 4
        let opts = QuadratureOptions::default();
        let v = integrate_graded(0.0, 1.0, 0.75, |u| u.powf(-0.75), &opts).unwrap();
        assert_relative_eq!(v, 4.0, max_relative = 1e-10);
        // cell away from the singular point
        let v = integrate_graded(0.5, 1.0, 0.75, |u| u.powf(-0.75), &opts).unwrap();
        assert_relative_eq!(v, 4.0 * (1.0 - 0.5f64.powf(0.25)), max_relative = 1e-10);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let opts = QuadratureOptions {
            max_subdivisions: 3,
            ..Default::default()
        };
        let err = integrate(|x: f64| (50.0 * x).sin().abs(), 0.0, 10.0, &opts).unwrap_err();
        assert!(matches!(err, Error::Quadrature { .. }));
    }

    #[test]
    fn symmetric_rule_is_mirrored_and_normalized() {
        for order in [1, 2, 7, 12, 66, 102] {
            let rule = SymmetricRule::new(order);
            assert_eq!(rule.order(), order);
            assert_relative_eq!(rule.integrate(|_| 1.0), 2.0, max_relative = 1e-13);
            assert_eq!(rule.integrate(|y| y.powi(3)), 0.0);
        }
    }
}
