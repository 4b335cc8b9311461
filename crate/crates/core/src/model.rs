//! Physical model: nonlinearity `f`, external potential `V`, scale `h` and
//! frequency `λ`, plus the admissibility checks run before any solve.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity `f(s)` with `s = |ψ|²`, normalized so that `f(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `f(s) = s`
    Cubic,
    /// `f(s) = s^p`, `p > 0`
    PurePower { p: f64 },
    /// `f(s) = Σ c_k s^k`; `coefficients[0]` must vanish.
    Polynomial { coefficients: Vec<f64> },
}

impl Nonlinearity {
    pub fn check(&self) -> Result<()> {
        match self {
            Nonlinearity::Cubic => Ok(()),
            Nonlinearity::PurePower { p } => {
                if p.is_finite() && *p > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidModel {
                        input: "nonlinearity.p".into(),
                        reason: format!("exponent {p} must be finite and positive"),
                    })
                }
            }
            Nonlinearity::Polynomial { coefficients } => {
                if coefficients.is_empty() {
                    return Err(Error::InvalidModel {
                        input: "nonlinearity.coefficients".into(),
                        reason: "empty coefficient list".into(),
                    });
                }
                if let Some(k) = coefficients.iter().position(|c| !c.is_finite()) {
                    return Err(Error::InvalidModel {
                        input: format!("nonlinearity.coefficients[{k}]"),
                        reason: "non-finite coefficient".into(),
                    });
                }
                if coefficients[0] != 0.0 {
                    return Err(Error::InvalidModel {
                        input: "nonlinearity.coefficients[0]".into(),
                        reason: "f(0) must vanish".into(),
                    });
                }
                Ok(())
            }
        }
    }

    pub fn f(&self, s: f64) -> f64 {
        match self {
            Nonlinearity::Cubic => s,
            Nonlinearity::PurePower { p } => s.max(0.0).powf(*p),
            Nonlinearity::Polynomial { coefficients } => horner(coefficients, s),
        }
    }

    pub fn df(&self, s: f64) -> f64 {
        match self {
            Nonlinearity::Cubic => 1.0,
            Nonlinearity::PurePower { p } => {
                if s <= 0.0 {
                    if *p > 1.0 {
                        0.0
                    } else if *p == 1.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    p * s.powf(p - 1.0)
                }
            }
            Nonlinearity::Polynomial { coefficients } => {
                let d: Vec<f64> = coefficients
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, c)| k as f64 * c)
                    .collect();
                horner(&d, s)
            }
        }
    }

    /// `F(s) = ½ ∫₀ˢ f`.
    pub fn primitive(&self, s: f64) -> f64 {
        match self {
            Nonlinearity::Cubic => 0.25 * s * s,
            Nonlinearity::PurePower { p } => {
                0.5 * s.max(0.0).powf(p + 1.0) / (p + 1.0)
            }
            Nonlinearity::Polynomial { coefficients } => {
                let mut q = vec![0.0; coefficients.len() + 1];
                for (k, c) in coefficients.iter().enumerate() {
                    q[k + 1] = 0.5 * c / (k as f64 + 1.0);
                }
                horner(&q, s)
            }
        }
    }

    /// `F(s)` by adaptive Simpson quadrature of `f`, independent of the closed forms.
    pub fn primitive_by_quadrature(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        0.5 * adaptive_simpson(&|t| self.f(t), 0.0, s, 1e-16, 50)
    }

    /// `f^{(k)}(0)`, exact for the built-in kinds (infinite when the derivative does not exist).
    pub fn derivative_at_zero(&self, k: usize) -> f64 {
        match self {
            Nonlinearity::Cubic => match k {
                0 => 0.0,
                1 => 1.0,
                _ => 0.0,
            },
            Nonlinearity::PurePower { p } => {
                let kf = k as f64;
                if (p - p.round()).abs() < 1e-14 && (kf - p).abs() < 1e-14 {
                    (1..=k).map(|i| i as f64).product()
                } else if kf < *p {
                    0.0
                } else if (p - p.round()).abs() < 1e-14 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Nonlinearity::Polynomial { coefficients } => {
                let c = coefficients.get(k).copied().unwrap_or(0.0);
                c * (1..=k).map(|i| i as f64).product::<f64>()
            }
        }
    }

    /// Peak density `s = φ(0)²` of the free ground state at frequency `λ`,
    /// the root of `2F(s)/s = λ` (first integral of the profile equation).
    pub fn peak_density(&self, lambda: f64) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "free ground state needs lambda > 0, got {lambda}"
            )));
        }
        if let Nonlinearity::Cubic = self {
            return Ok(2.0 * lambda);
        }
        let g = |s: f64| 2.0 * self.primitive(s) / s - lambda;
        let mut hi = 1.0;
        let mut tries = 0;
        while g(hi) <= 0.0 {
            hi *= 2.0;
            tries += 1;
            if tries > 200 {
                return Err(Error::NoConvergence {
                    stage: "peak density bracket".into(),
                    iterations: tries,
                    residual: g(hi),
                });
            }
        }
        let mut lo = hi * 1e-300_f64.max(f64::MIN_POSITIVE);
        if g(lo) > 0.0 {
            return Err(Error::ModelRejected(format!(
                "no free ground state at lambda = {lambda}"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn horner(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ck| acc * s + ck)
}

/// Adaptive Simpson with tolerance relative to the first whole-interval estimate.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    let tol = rel_tol * whole.abs().max(f64::MIN_POSITIVE);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// User-supplied analytic potential.
pub trait AnalyticPotential: Send + Sync {
    fn value(&self, x: f64) -> f64;

    fn derivative(&self, x: f64) -> f64 {
        let step = 1e-5;
        (self.value(x + step) - self.value(x - step)) / (2.0 * step)
    }

    fn second_derivative(&self, x: f64) -> f64 {
        let step = 1e-4;
        (self.value(x + step) - 2.0 * self.value(x) + self.value(x - step)) / (step * step)
    }

    fn name(&self) -> &str {
        "user"
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `V(x) = −A exp(−x²/w²)`
    GaussianWell { depth: f64, width: f64 },
    #[serde(skip)]
    User(Arc<dyn AnalyticPotential>),
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Zero => write!(f, "Zero"),
            Potential::GaussianWell { depth, width } => f
                .debug_struct("GaussianWell")
                .field("depth", depth)
                .field("width", width)
                .finish(),
            Potential::User(p) => write!(f, "User({})", p.name()),
        }
    }
}

impl PartialEq for Potential {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Potential::Zero, Potential::Zero) => true,
            (
                Potential::GaussianWell { depth: a, width: b },
                Potential::GaussianWell { depth: c, width: d },
            ) => a == c && b == d,
            (Potential::User(a), Potential::User(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Potential {
    pub fn check(&self) -> Result<()> {
        if let Potential::GaussianWell { depth, width } = self {
            if !(depth.is_finite() && *depth > 0.0) {
                return Err(Error::InvalidModel {
                    input: "potential.depth".into(),
                    reason: format!("depth {depth} must be finite and positive"),
                });
            }
            if !(width.is_finite() && *width > 0.0) {
                return Err(Error::InvalidModel {
                    input: "potential.width".into(),
                    reason: format!("width {width} must be finite and positive"),
                });
            }
        }
        Ok(())
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::GaussianWell { depth, width } => {
                let u = x / width;
                -depth * (-u * u).exp()
            }
            Potential::User(p) => p.value(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::GaussianWell { depth, width } => {
                let u = x / width;
                2.0 * depth * x / (width * width) * (-u * u).exp()
            }
            Potential::User(p) => p.derivative(x),
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::GaussianWell { depth, width } => {
                let w2 = width * width;
                let u2 = x * x / w2;
                2.0 * depth / w2 * (1.0 - 2.0 * u2) * (-u2).exp()
            }
            Potential::User(p) => p.second_derivative(x),
        }
    }

    /// Smallest `R` with `|V(x)| ≤ ε_mach` for `|x| ≥ R`, or `None` if no such
    /// radius is found below `1e4`.
    pub fn decay_radius(&self) -> Option<f64> {
        match self {
            Potential::Zero => Some(0.0),
            Potential::GaussianWell { depth, width } => {
                Some(width * (depth / f64::EPSILON).ln().max(0.0).sqrt())
            }
            Potential::User(p) => {
                let step = 0.01;
                let limit = 1e4;
                // walk inward from the limit; the last violation marks the radius
                let mut x = limit;
                let outer_ok = |x: f64| {
                    p.value(x).abs() <= f64::EPSILON && p.value(-x).abs() <= f64::EPSILON
                };
                if !outer_ok(limit) {
                    return None;
                }
                let mut stride = 1.0;
                while x > 0.0 {
                    let next = (x - stride).max(0.0);
                    if !outer_ok(next) {
                        if stride <= step {
                            return Some(x);
                        }
                        stride *= 0.1;
                        continue;
                    }
                    x = next;
                }
                Some(0.0)
            }
        }
    }
}

/// Open interval `(lower, upper)`, `upper = None` meaning `+∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl Interval {
    pub fn positive() -> Self {
        Self {
            lower: 0.0,
            upper: None,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.lower && self.upper.is_none_or(|u| x < u)
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_some_and(|u| u <= self.lower)
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        let upper = match (self.upper, other.upper) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        Interval {
            lower: self.lower.max(other.lower),
            upper,
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.upper {
            Some(u) => write!(f, "({}, {})", self.lower, u),
            None => write!(f, "({}, inf)", self.lower),
        }
    }
}

fn default_domain() -> Interval {
    Interval::positive()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub nonlinearity: Nonlinearity,
    pub potential: Potential,
    pub h: f64,
    pub lambda: f64,
    /// Existence interval `I₀` of the free family, declared by the user.
    #[serde(default = "default_domain")]
    pub lambda_domain: Interval,
}

impl ModelSpec {
    pub fn new(nonlinearity: Nonlinearity, potential: Potential, h: f64, lambda: f64) -> Result<Self> {
        let spec = Self {
            nonlinearity,
            potential,
            h,
            lambda,
            lambda_domain: Interval::positive(),
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    pub fn with_h(&self, h: f64) -> Self {
        Self { h, ..self.clone() }
    }

    /// Field-level sanity: finite numbers and well-formed kinds.
    pub fn check(&self) -> Result<()> {
        self.nonlinearity.check()?;
        self.potential.check()?;
        if !(self.h.is_finite() && self.h >= 0.0) {
            return Err(Error::InvalidModel {
                input: "h".into(),
                reason: format!("{} must be finite and non-negative", self.h),
            });
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidModel {
                input: "lambda".into(),
                reason: "non-finite".into(),
            });
        }
        Ok(())
    }

    /// `V_h(x) = V(hx)`.
    pub fn scaled_potential(&self, x: f64) -> f64 {
        self.potential.value(self.h * x)
    }

    /// `λ + V(0)`, the frequency of the free soliton the trapped one bifurcates from.
    pub fn shifted_lambda(&self) -> f64 {
        self.lambda + self.potential.value(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub passed: bool,
    pub witness: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationOptions {
    /// Upper end of the density range sampled for the growth check.
    pub s_max: Option<f64>,
    /// Threshold order used by the vanishing-derivative check.
    pub threshold_order: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            s_max: None,
            threshold_order: 1,
        }
    }
}

/// Runs the growth (fA), vanishing-derivative (fC), minimum (VA) and decay
/// (VB) checks. Failing checks are reported, not raised.
pub fn validate_model(spec: &ModelSpec, options: &ValidationOptions) -> Result<ValidationReport> {
    spec.check()?;
    let nl = &spec.nonlinearity;

    let s_max = match options.s_max {
        Some(s) => s,
        None => {
            let lam = spec.shifted_lambda();
            let peak = if lam > 0.0 { nl.peak_density(lam).unwrap_or(1.0) } else { 1.0 };
            10.0 * peak.max(0.1)
        }
    };
    if !(s_max.is_finite() && s_max > 0.0) {
        return Err(Error::InvalidModel {
            input: "s_max".into(),
            reason: format!("{s_max} must be finite and positive"),
        });
    }

    // Growth exponent from the log-log slope of |f| across the sampled range.
    let samples = 64;
    let s_lo = s_max * 1e-3;
    let mut points = Vec::with_capacity(samples);
    for i in 0..samples {
        let s = s_lo * (s_max / s_lo).powf(i as f64 / (samples - 1) as f64);
        let v = nl.f(s);
        if !v.is_finite() {
            return Err(Error::InvalidModel {
                input: format!("f({s})"),
                reason: "non-finite value".into(),
            });
        }
        points.push((s.ln(), v.abs().max(f64::MIN_POSITIVE).ln()));
    }
    let beta = points
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let beta_limit = 2.0;
    let fa = ConditionCheck {
        name: "fA".into(),
        passed: beta < beta_limit - 1e-9,
        witness: beta,
        detail: format!("growth exponent {beta:.6} on [0, {s_max:.4e}] vs bound {beta_limit}"),
    };

    let top = 3 * options.threshold_order + 1;
    let worst = (2..=top)
        .map(|k| (k, nl.derivative_at_zero(k)))
        .find(|(_, d)| *d != 0.0);
    let fc = ConditionCheck {
        name: "fC".into(),
        passed: worst.is_none(),
        witness: worst.map_or(0.0, |(_, d)| d),
        detail: match worst {
            Some((k, d)) => format!("f^({k})(0) = {d}"),
            None => format!("f^(k)(0) = 0 for k = 2..={top}"),
        },
    };

    let pot = &spec.potential;
    let v1 = pot.derivative(0.0);
    let v2 = pot.second_derivative(0.0);
    if !v1.is_finite() || !v2.is_finite() || !pot.value(0.0).is_finite() {
        return Err(Error::InvalidModel {
            input: "potential at 0".into(),
            reason: "non-finite value or derivative".into(),
        });
    }
    let va = ConditionCheck {
        name: "VA".into(),
        passed: v1.abs() <= 1e-12 && v2 > 0.0,
        witness: v2,
        detail: format!("V'(0) = {v1:.3e}, V''(0) = {v2}"),
    };

    let radius = pot.decay_radius();
    let vb = ConditionCheck {
        name: "VB".into(),
        passed: radius.is_some(),
        witness: radius.unwrap_or(f64::INFINITY),
        detail: match radius {
            Some(r) => format!("|V| <= eps_mach for |x| >= {r:.6}"),
            None => "no decay radius below 1e4".into(),
        },
    };

    Ok(ValidationReport {
        checks: vec![fa, fc, va, vb],
    })
}

/// `inf V` over the real line, by sampling followed by golden-section refinement.
pub fn potential_infimum(potential: &Potential) -> Result<f64> {
    let radius = potential.decay_radius().unwrap_or(1e4).max(1.0);
    let samples = 20_001;
    let at = |i: usize| -radius + 2.0 * radius * i as f64 / (samples - 1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..samples {
        let v = potential.value(at(i));
        if !v.is_finite() {
            return Err(Error::InvalidModel {
                input: format!("V({})", at(i)),
                reason: "non-finite value".into(),
            });
        }
        if v < best.1 {
            best = (i, v);
        }
    }
    let (mut a, mut b) = (at(best.0.saturating_sub(1)), at((best.0 + 1).min(samples - 1)));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (potential.value(c), potential.value(d));
    while (b - a).abs() > 1e-12 * (1.0 + a.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = potential.value(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = potential.value(d);
        }
    }
    let refined = potential.value(0.5 * (a + b)).min(best.1);
    // V decays at infinity, so the infimum is never above 0.
    Ok(refined.min(0.0))
}

/// `{λ : λ > −inf V} ∩ I₀`.
pub fn admissible_lambda_interval(spec: &ModelSpec) -> Result<Interval> {
    spec.check()?;
    let inf_v = potential_infimum(&spec.potential)?;
    let own = Interval {
        lower: -inf_v,
        upper: None,
    };
    let interval = own.intersect(&spec.lambda_domain);
    if interval.is_empty() {
        return Err(Error::ModelRejected(format!(
            "admissible lambda interval I_0V = {own} ∩ I_0 {} is empty",
            spec.lambda_domain
        )));
    }
    Ok(interval)
}

/// Checks `λ ∈ I_{0V}` and names the violation otherwise.
pub fn check_lambda(spec: &ModelSpec) -> Result<Interval> {
    let interval = admissible_lambda_interval(spec)?;
    if !interval.contains(spec.lambda) {
        return Err(Error::ModelRejected(format!(
            "lambda = {} outside the admissible interval I_0V = {interval}",
            spec.lambda
        )));
    }
    Ok(interval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn well(depth: f64) -> Potential {
        Potential::GaussianWell { depth, width: 1.0 }
    }

    fn canonical() -> ModelSpec {
        ModelSpec::new(Nonlinearity::Cubic, well(0.2), 0.1, 0.25).unwrap()
    }

    #[test]
    fn cubic_passes_growth_and_flatness() {
        let r = validate_model(&canonical(), &ValidationOptions::default()).unwrap();
        let fa = r.get("fA").unwrap();
        assert!(fa.passed);
        assert!((fa.witness - 1.0).abs() < 1e-9);
        assert!(r.get("fC").unwrap().passed);
        assert!(r.all_passed());
    }

    #[test]
    fn gaussian_well_curvature_witness() {
        let r = validate_model(&canonical(), &ValidationOptions::default()).unwrap();
        let va = r.get("VA").unwrap();
        let v = |x: f64| -0.2 * (-x * x).exp();
        let step = 1e-4;
        let fd = (v(step) - 2.0 * v(0.0) + v(-step)) / (step * step);
        assert!((va.witness - 0.4).abs() < 1e-14);
        assert!((va.witness - fd).abs() < 1e-6);
        assert!(va.passed);
        let vb = r.get("VB").unwrap();
        assert!(well(0.2).value(vb.witness).abs() <= f64::EPSILON * 1.0001);
    }

    #[test]
    fn supercritical_and_non_flat_flagged() {
        let spec = ModelSpec::new(Nonlinearity::PurePower { p: 2.5 }, well(0.2), 0.1, 0.25).unwrap();
        let r = validate_model(&spec, &ValidationOptions::default()).unwrap();
        assert!(!r.get("fA").unwrap().passed);
        let quad = ModelSpec::new(
            Nonlinearity::Polynomial {
                coefficients: vec![0.0, 1.0, 0.5],
            },
            well(0.2),
            0.1,
            0.25,
        )
        .unwrap();
        let r = validate_model(&quad, &ValidationOptions::default()).unwrap();
        assert!(!r.get("fC").unwrap().passed);
        assert_eq!(r.get("fC").unwrap().witness, 1.0);
        let zero = ModelSpec::new(Nonlinearity::Cubic, Potential::Zero, 0.1, 0.25).unwrap();
        let r = validate_model(&zero, &ValidationOptions::default()).unwrap();
        assert!(!r.get("VA").unwrap().passed);
    }

    #[test]
    fn rejects_malformed_input() {
        let bad = Nonlinearity::Polynomial {
            coefficients: vec![0.1, 1.0],
        };
        assert!(matches!(
            ModelSpec::new(bad, Potential::Zero, 0.1, 1.0),
            Err(Error::InvalidModel { .. })
        ));
        assert!(ModelSpec::new(Nonlinearity::Cubic, well(-1.0), 0.1, 1.0).is_err());
        assert!(ModelSpec::new(Nonlinearity::Cubic, Potential::Zero, f64::NAN, 1.0).is_err());

        struct Singular;
        impl AnalyticPotential for Singular {
            fn value(&self, x: f64) -> f64 {
                1.0 / x
            }
        }
        let spec = ModelSpec::new(Nonlinearity::Cubic, Potential::User(Arc::new(Singular)), 0.1, 1.0)
            .unwrap();
        assert!(matches!(
            validate_model(&spec, &ValidationOptions::default()),
            Err(Error::InvalidModel { .. })
        ));
    }

    #[test]
    fn admissible_intervals() {
        let dense_inf = |v: &Potential| {
            (0..400_001)
                .map(|i| v.value(-20.0 + 1e-4 * i as f64))
                .fold(0.0, f64::min)
        };
        let r = admissible_lambda_interval(&canonical()).unwrap();
        assert!((r.lower - 0.2).abs() < 1e-10 && r.upper.is_none());
        assert!((r.lower + dense_inf(&well(0.2))).abs() < 1e-10);

        let free = ModelSpec::new(Nonlinearity::Cubic, Potential::Zero, 0.1, 1.0).unwrap();
        assert_eq!(admissible_lambda_interval(&free).unwrap(), Interval::positive());

        let mut deep = ModelSpec::new(Nonlinearity::Cubic, well(1.0), 0.1, 1.5).unwrap();
        deep.lambda_domain = Interval {
            lower: 0.0,
            upper: Some(2.0),
        };
        let r = admissible_lambda_interval(&deep).unwrap();
        assert!((r.lower - 1.0).abs() < 1e-10 && r.upper == Some(2.0));
        assert!((r.lower + dense_inf(&well(1.0))).abs() < 1e-10);

        deep.lambda_domain.upper = Some(0.5);
        assert!(matches!(admissible_lambda_interval(&deep), Err(Error::ModelRejected(_))));

        let outside = canonical().with_lambda(0.1);
        let msg = check_lambda(&outside).unwrap_err().to_string();
        assert!(msg.contains("I_0V"));
    }

    #[test]
    fn off_center_user_minimum() {
        struct Shifted;
        impl AnalyticPotential for Shifted {
            fn value(&self, x: f64) -> f64 {
                let u = x - 0.3;
                -0.7 * (-u * u).exp()
            }
        }
        let inf = potential_infimum(&Potential::User(Arc::new(Shifted))).unwrap();
        assert!((inf + 0.7).abs() < 1e-10);
    }

    #[test]
    fn peak_density_matches_first_integral() {
        assert_eq!(Nonlinearity::Cubic.peak_density(1.0).unwrap(), 2.0);
        // pure power: 2F(s)/s = s^p/(p+1)
        let nl = Nonlinearity::PurePower { p: 1.5 };
        let s = nl.peak_density(0.3).unwrap();
        assert!((s.powf(1.5) / 2.5 - 0.3).abs() < 1e-12);
        let poly = Nonlinearity::Polynomial {
            coefficients: vec![0.0, 1.0],
        };
        assert!((poly.peak_density(0.7).unwrap() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip() {
        let spec = canonical();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"gaussian_well\""));
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let parsed: Nonlinearity =
            serde_json::from_str(r#"{"kind":"pure_power","params":{"p":2.0}}"#).unwrap();
        assert_eq!(parsed, Nonlinearity::PurePower { p: 2.0 });
        let cubic: Nonlinearity = serde_json::from_str(r#"{"kind":"cubic"}"#).unwrap();
        assert_eq!(cubic, Nonlinearity::Cubic);
    }

    proptest! {
        #[test]
        fn primitive_matches_quadrature(s in 0.0f64..20.0, p in 0.5f64..3.0) {
            for nl in [
                Nonlinearity::Cubic,
                Nonlinearity::PurePower { p },
                Nonlinearity::Polynomial { coefficients: vec![0.0, 1.0, -0.2, 0.03] },
            ] {
                let closed = nl.primitive(s);
                let quad = nl.primitive_by_quadrature(s);
                prop_assert!((closed - quad).abs() <= 1e-12 * closed.abs().max(1e-300) + 1e-300,
                    "{nl:?} s={s}: {closed} vs {quad}");
            }
        }

        #[test]
        fn pure_power_derivative_matches_differences(p in 0.5f64..4.0) {
            let nl = Nonlinearity::PurePower { p };
            for i in 1..=20 {
                let s = 0.25 * i as f64;
                let step = 1e-6 * s;
                let fd = (nl.f(s + step) - nl.f(s - step)) / (2.0 * step);
                let exact = nl.df(s);
                prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs());
            }
        }

        #[test]
        fn primitive_monotone_for_nonnegative_f(p in 0.5f64..3.0, s in 0.1f64..10.0) {
            let nl = Nonlinearity::PurePower { p };
            prop_assert_eq!(nl.primitive(0.0), 0.0);
            let mut last = 0.0;
            for i in 1..=50 {
                let v = nl.primitive_by_quadrature(s * i as f64 / 50.0);
                prop_assert!(v >= last);
                last = v;
            }
        }
    }
}
