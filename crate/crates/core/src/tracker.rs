//! Modulation decomposition of an evolving field about the soliton manifold.
//!
//! `ψ = e^{iθ}(φ^λ + z₁ξ + i z₂η + R)` with `θ = ∫λ + γ`, fixed by
//! `⟨Re R, φ⟩ = ⟨Im R, ∂_λφ⟩ = ⟨Re R, η⟩ = ⟨Im R, ξ⟩ = 0`.
//! The module also fits decay envelopes, identifies the normal form and
//! extracts the center dynamics.

use std::io::Write;

use faer::prelude::*;
use faer::Mat;
use log::{debug, warn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{Observer, Snapshot};
use crate::grid::{dot_real, inner_slices, norm_real, weighted_norm, Grid1D, WaveField, DEFAULT_NU};
use crate::groundstate::{lambda_derivative, solve_ground_state, solve_trapped_soliton, SolitonProfile, LAMBDA_STEP};
use crate::io::write_csv;
use crate::linearization::{assemble, near_zero_spectrum, refine_internal_mode, InternalMode};
use crate::model::ModelSpec;

/// Orthogonality target of the decomposition Newton solve.
pub const DECOMPOSE_TOL: f64 = 1e-10;
pub const MAX_DECOMPOSE_ITERATIONS: usize = 50;
/// `‖R‖ / ‖φ^λ‖` above which a field is declared off the manifold.
pub const TRUST_RADIUS: f64 = 0.5;
/// Amplitudes below this are treated as numerical noise by the fits.
pub const NOISE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Half width of the `λ` window, relative to the center.
    pub half_width: f64,
    /// Node spacing, relative to the center.
    pub spacing: f64,
    /// Admissible interpolation error, checked at a mid-node point.
    pub budget: f64,
    pub nu: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            half_width: 0.08,
            spacing: 0.005,
            budget: 1e-8,
            nu: DEFAULT_NU,
        }
    }
}

/// Everything the decomposition needs at one `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeFrame {
    pub lambda: f64,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub epsilon: f64,
    /// `δ(λ) = ‖φ^λ‖²`.
    pub mass: f64,
}

/// `(φ, ∂_λφ, ξ, η)` on a uniform `λ` grid, read by 4-point Lagrange interpolation.
#[derive(Clone, Debug)]
pub struct ModeCache {
    model: ModelSpec,
    grid: Grid1D,
    nu: f64,
    start: f64,
    step: f64,
    nodes: Vec<ModeFrame>,
    interpolation_error: f64,
}

fn frame_for(model: &ModelSpec, grid: &Grid1D, profile: SolitonProfile, mode: InternalMode) -> Result<ModeFrame> {
    let dphi = lambda_derivative(model, grid, &profile, LAMBDA_STEP)?;
    let mass = dot_real(&profile.profile, &profile.profile, grid.dx());
    Ok(ModeFrame {
        lambda: model.lambda,
        phi: profile.profile,
        dphi,
        xi: mode.xi,
        eta: mode.eta,
        epsilon: mode.epsilon,
        mass,
    })
}

fn relative_sup(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

impl ModeCache {
    /// Builds the cache around `model.lambda`, computing the principal mode there.
    pub fn new(model: &ModelSpec, grid: &Grid1D, config: CacheConfig) -> Result<Self> {
        let profile = solve_ground_state(model, grid)?;
        let op = assemble(model, &profile, grid)?;
        let report = near_zero_spectrum(&op, 4)?;
        let mode = report
            .principal()
            .ok_or_else(|| Error::InvalidConfig("no internal mode to track".into()))?;
        Self::from_mode(model, grid, &profile, mode, config)
    }

    /// Builds the cache from a ground state and its principal mode at `model.lambda`.
    ///
    /// Nodes are reached by continuation outward from the center; each mode is
    /// polished from its neighbour. The spacing is halved (at most twice) until
    /// the mid-node interpolation error meets the budget.
    pub fn from_mode(
        model: &ModelSpec,
        grid: &Grid1D,
        profile: &SolitonProfile,
        mode: &InternalMode,
        config: CacheConfig,
    ) -> Result<Self> {
        if !(config.spacing > 0.0 && config.half_width >= config.spacing) {
            return Err(Error::InvalidConfig("cache spacing must be positive and below the half width".into()));
        }
        let mut spacing = config.spacing;
        let mut last = None;
        for _ in 0..3 {
            let cache = Self::build(model, grid, profile, mode, config, spacing)?;
            if cache.interpolation_error <= config.budget {
                return Ok(cache);
            }
            debug!(
                "cache spacing {spacing:.2e}: interpolation error {:.2e} over budget",
                cache.interpolation_error
            );
            spacing *= 0.5;
            last = Some(cache);
        }
        let cache = last.expect("at least one build");
        warn!(
            "λ-cache interpolation error {:.2e} exceeds budget {:.1e}",
            cache.interpolation_error, config.budget
        );
        Ok(cache)
    }

    fn build(
        model: &ModelSpec,
        grid: &Grid1D,
        profile: &SolitonProfile,
        mode: &InternalMode,
        config: CacheConfig,
        spacing: f64,
    ) -> Result<Self> {
        let lambda0 = model.lambda;
        let step = spacing * lambda0;
        let k = (config.half_width / spacing).ceil() as i64;
        let center = refine_internal_mode(model, profile, mode)?;
        let mut upper = vec![(profile.clone(), center.clone())];
        let mut lower = vec![(profile.clone(), center)];
        for side in [1.0, -1.0] {
            let chain = if side > 0.0 { &mut upper } else { &mut lower };
            for j in 1..=k {
                let m = model.with_lambda(lambda0 + side * j as f64 * step);
                let (prev_profile, prev_mode) = chain.last().expect("seeded");
                let p = solve_trapped_soliton(&m, grid, prev_profile)?;
                let md = refine_internal_mode(&m, &p, prev_mode)?;
                chain.push((p, md));
            }
        }
        let mut states: Vec<(SolitonProfile, InternalMode)> = lower.into_iter().skip(1).rev().collect();
        states.extend(upper);
        let nodes = states
            .into_iter()
            .enumerate()
            .map(|(i, (p, md))| {
                let m = model.with_lambda(lambda0 + (i as i64 - k) as f64 * step);
                frame_for(&m, grid, p, md)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cache = Self {
            model: model.clone(),
            grid: *grid,
            nu: config.nu,
            start: lambda0 - k as f64 * step,
            step,
            nodes,
            interpolation_error: 0.0,
        };
        // probe half way between the center and its upper neighbour
        let probe = lambda0 + 0.5 * step;
        let m = model.with_lambda(probe);
        let center_node = &cache.nodes[k as usize];
        let seed = SolitonProfile {
            lambda: lambda0,
            h: model.h,
            grid: *grid,
            profile: center_node.phi.clone(),
            residual: 0.0,
            iterations: 0,
        };
        let p = solve_trapped_soliton(&m, grid, &seed)?;
        let guess = InternalMode {
            epsilon: center_node.epsilon,
            xi: center_node.xi.clone(),
            eta: center_node.eta.clone(),
            residual: 0.0,
        };
        let md = refine_internal_mode(&m, &p, &guess)?;
        let direct = frame_for(&m, grid, p, md)?;
        let interp = cache.frame(probe)?;
        cache.interpolation_error = [
            relative_sup(&interp.phi, &direct.phi),
            relative_sup(&interp.dphi, &direct.dphi),
            relative_sup(&interp.xi, &direct.xi),
            relative_sup(&interp.eta, &direct.eta),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        Ok(cache)
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn range(&self) -> (f64, f64) {
        (self.start, self.start + self.step * (self.nodes.len() - 1) as f64)
    }

    pub fn contains(&self, lambda: f64) -> bool {
        let (lo, hi) = self.range();
        lambda >= lo && lambda <= hi
    }

    pub fn nodes(&self) -> &[ModeFrame] {
        &self.nodes
    }

    /// Relative sup error of the interpolated frame at the mid-node probe.
    pub fn interpolation_error(&self) -> f64 {
        self.interpolation_error
    }

    fn stencil(&self, lambda: f64) -> Result<(usize, [f64; 4])> {
        let (lo, hi) = self.range();
        if !(lambda >= lo && lambda <= hi) {
            return Err(Error::OutOfRange { lambda, lo, hi });
        }
        let t = (lambda - self.start) / self.step;
        let i0 = (t.floor() as i64 - 1).clamp(0, self.nodes.len() as i64 - 4) as usize;
        let s = t - i0 as f64;
        let mut w = [0.0; 4];
        for (a, wa) in w.iter_mut().enumerate() {
            *wa = (0..4)
                .filter(|&b| b != a)
                .map(|b| (s - b as f64) / (a as f64 - b as f64))
                .product();
        }
        Ok((i0, w))
    }

    /// Interpolated frame at `lambda`.
    pub fn frame(&self, lambda: f64) -> Result<ModeFrame> {
        let (i0, w) = self.stencil(lambda)?;
        let nodes = &self.nodes[i0..i0 + 4];
        let mix = |get: fn(&ModeFrame) -> &Vec<f64>| -> Vec<f64> {
            let n = get(&nodes[0]).len();
            (0..n).map(|j| (0..4).map(|a| w[a] * get(&nodes[a])[j]).sum()).collect()
        };
        Ok(ModeFrame {
            lambda,
            phi: mix(|f| &f.phi),
            dphi: mix(|f| &f.dphi),
            xi: mix(|f| &f.xi),
            eta: mix(|f| &f.eta),
            epsilon: (0..4).map(|a| w[a] * nodes[a].epsilon).sum(),
            mass: (0..4).map(|a| w[a] * nodes[a].mass).sum(),
        })
    }

    pub fn mass(&self, lambda: f64) -> Result<f64> {
        let (i0, w) = self.stencil(lambda)?;
        Ok((0..4).map(|a| w[a] * self.nodes[i0 + a].mass).sum())
    }

    pub fn epsilon(&self, lambda: f64) -> Result<f64> {
        let (i0, w) = self.stencil(lambda)?;
        Ok((0..4).map(|a| w[a] * self.nodes[i0 + a].epsilon).sum())
    }

    /// Inverts `δ(λ) = mass` by bisection, clamped to the cache range.
    pub fn lambda_from_mass(&self, mass: f64) -> f64 {
        let (mut lo, mut hi) = self.range();
        let increasing = self.nodes.last().map(|f| f.mass) > self.nodes.first().map(|f| f.mass);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let m = self.mass(mid).unwrap_or(f64::NAN);
            if (m < mass) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Modulation parameters `(λ, θ, z₁, z₂)` with `θ` the total phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guess {
    pub lambda: f64,
    pub theta: f64,
    pub z1: f64,
    pub z2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub time: f64,
    pub lambda: f64,
    /// Total phase `∫λ + γ`.
    pub theta: f64,
    /// Phase beyond `∫λ`; equals `theta` for an isolated snapshot.
    pub gamma: f64,
    pub z1: f64,
    pub z2: f64,
    /// `R = u + iv` on the grid.
    pub remainder: Vec<Complex64>,
    pub remainder_norm: f64,
    /// `‖(1+x²)^{−ν/2} R‖₂`.
    pub weighted_norm: f64,
    /// `|⟨Re R, φ⟩|, |⟨Im R, ∂_λφ⟩|, |⟨Re R, η⟩|, |⟨Im R, ξ⟩|` at exit.
    pub orthogonality: [f64; 4],
    pub iterations: usize,
}

impl Decomposition {
    /// `z = z₁ − i z₂`.
    pub fn z(&self) -> Complex64 {
        Complex64::new(self.z1, -self.z2)
    }

    pub fn guess(&self) -> Guess {
        Guess {
            lambda: self.lambda,
            theta: self.theta,
            z1: self.z1,
            z2: self.z2,
        }
    }
}

struct Evaluation {
    g: [f64; 4],
    frame: ModeFrame,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn evaluate(field: &WaveField, cache: &ModeCache, p: &Guess) -> Result<Evaluation> {
    let frame = cache.frame(p.lambda)?;
    let dx = field.grid.dx();
    let rot = Complex64::from_polar(1.0, -p.theta);
    let mut u = Vec::with_capacity(field.values.len());
    let mut v = Vec::with_capacity(field.values.len());
    for (j, psi) in field.values.iter().enumerate() {
        let w = psi * rot;
        u.push(w.re - frame.phi[j] - p.z1 * frame.xi[j]);
        v.push(w.im - p.z2 * frame.eta[j]);
    }
    let g = [
        dot_real(&u, &frame.phi, dx),
        dot_real(&v, &frame.dphi, dx),
        dot_real(&u, &frame.eta, dx),
        dot_real(&v, &frame.xi, dx),
    ];
    Ok(Evaluation { g, frame, u, v })
}

fn cold_start(field: &WaveField, cache: &ModeCache) -> Guess {
    let lambda = cache.lambda_from_mass(field.mass());
    let origin = field.values[field.grid.origin()];
    let theta = if origin.norm() > 1e-3 * field.sup_norm() {
        origin.arg()
    } else {
        let frame = cache.frame(lambda).expect("clamped into range");
        let phi: Vec<Complex64> = frame.phi.iter().map(|&p| Complex64::new(p, 0.0)).collect();
        inner_slices(&phi, &field.values, field.grid.dx()).arg()
    };
    Guess {
        lambda,
        theta,
        z1: 0.0,
        z2: 0.0,
    }
}

/// Solves for `(λ, θ, z₁, z₂)` by Newton iteration from `guess` (cold start
/// from the mass and the phase at `x = 0` when absent).
pub fn decompose(field: &WaveField, cache: &ModeCache, guess: Option<Guess>) -> Result<Decomposition> {
    if !field.grid.same_as(&cache.grid) {
        return Err(Error::InvalidGrid("field and cache grids differ".into()));
    }
    let dx = field.grid.dx();
    let psi_norm = field.norm();
    let mut p = guess.unwrap_or_else(|| cold_start(field, cache));
    let (lo, hi) = cache.range();
    let mut p_in = p;
    p_in.lambda = p.lambda.clamp(lo, hi);
    p = p_in;

    let tol = DECOMPOSE_TOL * psi_norm.max(1.0);
    let mut iterations = 0;
    let mut pinned = 0;
    let eval = loop {
        let e = evaluate(field, cache, &p)?;
        let res = e.g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if res <= 1e-2 * tol || (res <= tol && iterations > 0 && pinned == 0) {
            break e;
        }
        if iterations == MAX_DECOMPOSE_ITERATIONS || !res.is_finite() {
            return Err(Error::DecompositionLost(format!(
                "Newton stalled at orthogonality residual {res:.3e} after {iterations} iterations"
            )));
        }
        iterations += 1;
        let f = &e.frame;
        let (re_w, im_w): (Vec<f64>, Vec<f64>) = e
            .u
            .iter()
            .zip(&e.v)
            .enumerate()
            .map(|(j, (u, v))| (u + f.phi[j] + p.z1 * f.xi[j], v + p.z2 * f.eta[j]))
            .unzip();
        let mut jac = Mat::<f64>::zeros(4, 4);
        // λ column by central difference of the interpolated frame
        let hl = 1e-6 * p.lambda.abs();
        let (a, b) = ((p.lambda - hl).max(lo), (p.lambda + hl).min(hi));
        let gp = evaluate(field, cache, &Guess { lambda: b, ..p })?.g;
        let gm = evaluate(field, cache, &Guess { lambda: a, ..p })?.g;
        for i in 0..4 {
            jac[(i, 0)] = (gp[i] - gm[i]) / (b - a);
        }
        // θ: ∂u = Im w, ∂v = −Re w
        jac[(0, 1)] = dot_real(&im_w, &f.phi, dx);
        jac[(1, 1)] = -dot_real(&re_w, &f.dphi, dx);
        jac[(2, 1)] = dot_real(&im_w, &f.eta, dx);
        jac[(3, 1)] = -dot_real(&re_w, &f.xi, dx);
        jac[(0, 2)] = -dot_real(&f.xi, &f.phi, dx);
        jac[(2, 2)] = -dot_real(&f.xi, &f.eta, dx);
        jac[(1, 3)] = -dot_real(&f.eta, &f.dphi, dx);
        jac[(3, 3)] = -dot_real(&f.eta, &f.xi, dx);
        let rhs = Mat::from_fn(4, 1, |i, _| -e.g[i]);
        let delta = jac.partial_piv_lu().solve(&rhs);
        if (0..4).any(|i| !delta[(i, 0)].is_finite()) {
            return Err(Error::DecompositionLost("singular modulation Jacobian".into()));
        }
        let target = p.lambda + delta[(0, 0)];
        let lambda = target.clamp(lo, hi);
        pinned = if lambda != target { pinned + 1 } else { 0 };
        p = Guess {
            lambda,
            theta: p.theta + delta[(1, 0)],
            z1: p.z1 + delta[(2, 0)],
            z2: p.z2 + delta[(3, 0)],
        };
        if pinned >= 3 {
            let e = evaluate(field, cache, &p)?;
            let r = norm_real(&e.u, dx).hypot(norm_real(&e.v, dx));
            if r > TRUST_RADIUS * norm_real(&e.frame.phi, dx) {
                return Err(Error::DecompositionLost(format!("remainder {r:.3e} at the cache boundary")));
            }
            return Err(Error::OutOfRange {
                lambda: target,
                lo,
                hi,
            });
        }
    };

    let remainder: Vec<Complex64> = eval.u.iter().zip(&eval.v).map(|(&u, &v)| Complex64::new(u, v)).collect();
    let remainder_norm = norm_real(&eval.u, dx).hypot(norm_real(&eval.v, dx));
    let phi_norm = norm_real(&eval.frame.phi, dx);
    if remainder_norm > TRUST_RADIUS * phi_norm {
        return Err(Error::DecompositionLost(format!(
            "remainder norm {remainder_norm:.3e} exceeds {TRUST_RADIUS} of the soliton norm {phi_norm:.3e}"
        )));
    }
    Ok(Decomposition {
        time: field.time,
        lambda: p.lambda,
        theta: p.theta,
        gamma: p.theta,
        z1: p.z1,
        z2: p.z2,
        weighted_norm: weighted_norm(&field.grid, &remainder, cache.nu),
        remainder,
        remainder_norm,
        orthogonality: eval.g.map(f64::abs),
        iterations,
    })
}

/// `e^{iθ}(φ^λ + z₁ξ + i z₂η + R)`.
pub fn reconstruct(d: &Decomposition, cache: &ModeCache) -> Result<WaveField> {
    let f = cache.frame(d.lambda)?;
    let phase = Complex64::from_polar(1.0, d.theta);
    let values = d
        .remainder
        .iter()
        .enumerate()
        .map(|(j, r)| phase * (Complex64::new(f.phi[j] + d.z1 * f.xi[j], d.z2 * f.eta[j]) + r))
        .collect();
    WaveField::new(cache.grid, values, d.time)
}

/// Recomputes `R` from the field and evaluates
/// `Im⟨R, iφ⟩, Im⟨R, ∂_λφ⟩, Im⟨R, iη⟩, Im⟨R, ξ⟩` with complex inner products.
pub fn orthogonality_residuals(field: &WaveField, d: &Decomposition, cache: &ModeCache) -> Result<[f64; 4]> {
    let f = cache.frame(d.lambda)?;
    let rot = Complex64::from_polar(1.0, -d.theta);
    let r: Vec<Complex64> = field
        .values
        .iter()
        .enumerate()
        .map(|(j, psi)| psi * rot - Complex64::new(f.phi[j] + d.z1 * f.xi[j], d.z2 * f.eta[j]))
        .collect();
    let dx = field.grid.dx();
    let i = Complex64::new(0.0, 1.0);
    let lift = |v: &[f64], c: Complex64| v.iter().map(|&a| c * a).collect::<Vec<_>>();
    let one = Complex64::new(1.0, 0.0);
    Ok([
        inner_slices(&r, &lift(&f.phi, i), dx).im.abs(),
        inner_slices(&r, &lift(&f.dphi, one), dx).im.abs(),
        inner_slices(&r, &lift(&f.eta, i), dx).im.abs(),
        inner_slices(&r, &lift(&f.xi, one), dx).im.abs(),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub t: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub theta: f64,
    pub z1: f64,
    pub z2: f64,
    pub abs_z: f64,
    pub wnorm_r: f64,
    pub norm_r: f64,
    /// Center `a = ∫x|ψ|²/N`.
    pub a: f64,
    /// Momentum `p = Im∫ψ̄ψ_x / N`.
    pub p: f64,
    pub mass: f64,
    /// `|N(ψ) − δ(λ)|`.
    pub mass_defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFailure {
    pub t: f64,
    pub reason: String,
}

/// Observer that decomposes every snapshot it receives.
pub struct Tracker<'c> {
    cache: &'c ModeCache,
    samples: Vec<TrackSample>,
    failures: Vec<TrackFailure>,
    attempted: usize,
    last: Option<(f64, Guess)>,
    phase_integral: f64,
}

impl<'c> Tracker<'c> {
    pub fn new(cache: &'c ModeCache) -> Self {
        Self {
            cache,
            samples: Vec::new(),
            failures: Vec::new(),
            attempted: 0,
            last: None,
            phase_integral: 0.0,
        }
    }

    pub fn samples(&self) -> &[TrackSample] {
        &self.samples
    }

    pub fn failures(&self) -> &[TrackFailure] {
        &self.failures
    }

    /// Decomposes `field`, predicting the phase and mode rotation from the previous sample.
    pub fn record(&mut self, field: &WaveField, a: f64, p: f64) -> Result<TrackSample> {
        self.attempted += 1;
        let t = field.time;
        let guess = self.last.and_then(|(t0, g)| {
            let dt = t - t0;
            let eps = self.cache.epsilon(g.lambda).ok()?;
            let z = Complex64::new(g.z1, -g.z2) * Complex64::from_polar(1.0, eps * dt);
            Some(Guess {
                lambda: g.lambda,
                theta: g.theta + g.lambda * dt,
                z1: z.re,
                z2: -z.im,
            })
        });
        let result = decompose(field, self.cache, guess).or_else(|e| match guess {
            Some(_) => decompose(field, self.cache, None).map_err(|_| e),
            None => Err(e),
        });
        let d = match result {
            Ok(d) => d,
            Err(e) => {
                self.failures.push(TrackFailure {
                    t,
                    reason: e.to_string(),
                });
                return Err(e);
            }
        };
        let mut theta = d.theta;
        if let Some((t0, g)) = self.last {
            // keep θ continuous when a cold start lands on another sheet
            let predicted = g.theta + g.lambda * (t - t0);
            theta += (2.0 * std::f64::consts::PI) * ((predicted - theta) / (2.0 * std::f64::consts::PI)).round();
            self.phase_integral += 0.5 * (g.lambda + d.lambda) * (t - t0);
        }
        let mass = field.mass();
        let sample = TrackSample {
            t,
            lambda: d.lambda,
            gamma: theta - self.phase_integral,
            theta,
            z1: d.z1,
            z2: d.z2,
            abs_z: d.z().norm(),
            wnorm_r: d.weighted_norm,
            norm_r: d.remainder_norm,
            a,
            p,
            mass,
            mass_defect: (mass - self.cache.mass(d.lambda)?).abs(),
        };
        self.last = Some((t, Guess { theta, ..d.guess() }));
        self.samples.push(sample);
        Ok(sample)
    }

    pub fn finish(self, options: &TrackOptions) -> TrackSeries {
        track(self.samples, self.attempted, self.failures, options)
    }
}

impl Observer for Tracker<'_> {
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<()> {
        let obs = snapshot.observables;
        self.record(snapshot.field, obs.center, obs.momentum).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    /// Decay exponent in `c(1+t)^{−α}`.
    pub alpha: f64,
    /// 95% half width of `alpha`.
    pub ci: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub points: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Whether local maxima were used (otherwise the series itself).
    pub from_maxima: bool,
    /// Largest relative rise between consecutive envelope points.
    pub max_rise: f64,
}

/// Points of the upper envelope for `t ≥ t_min`: local maxima when there are
/// at least three, else the samples themselves (already monotone input).
pub fn envelope_points(times: &[f64], values: &[f64], t_min: f64) -> (Vec<(f64, f64)>, bool) {
    let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= t_min).collect();
    let maxima: Vec<(f64, f64)> = idx
        .windows(3)
        .filter(|w| values[w[1]] > values[w[0]] && values[w[1]] >= values[w[2]])
        .map(|w| (times[w[1]], values[w[1]]))
        .collect();
    if maxima.len() >= 3 {
        (maxima, true)
    } else {
        (idx.iter().map(|&i| (times[i], values[i])).collect(), false)
    }
}

/// Fits `c(1+t)^{−α}` to the envelope of `values` after `t_min` by log-log regression.
pub fn fit_envelope(times: &[f64], values: &[f64], t_min: f64) -> Result<EnvelopeFit> {
    if times.len() != values.len() {
        return Err(Error::Dimension("envelope series lengths differ".into()));
    }
    let (pts, from_maxima) = envelope_points(times, values, t_min);
    if pts.iter().all(|p| p.1.abs() <= NOISE_FLOOR) {
        return Err(Error::FitUnavailable("amplitude at the noise floor".into()));
    }
    let logs: Vec<(f64, f64)> = pts
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|&(t, v)| ((1.0 + t).ln(), v.ln()))
        .collect();
    if logs.len() < 3 {
        return Err(Error::FitUnavailable(format!("{} envelope points", logs.len())));
    }
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::FitUnavailable("degenerate time window".into()));
    }
    let slope = sxy / sxx;
    let ssr: f64 = logs.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let se = (ssr / (m - 2.0).max(1.0) / sxx).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    let max_rise = pts
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / w[0].1.abs())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    Ok(EnvelopeFit {
        alpha: -slope,
        ci: 1.96 * se,
        prefactor: (my - slope * mx).exp(),
        r_squared,
        points: logs.len(),
        t_start: pts[0].0,
        t_end: pts[pts.len() - 1].0,
        from_maxima,
        max_rise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFormFit {
    pub n: usize,
    pub epsilon: f64,
    pub y_re: f64,
    pub y_im: f64,
    /// Fitted `Im Y_k` for `k < N` (frequency corrections).
    pub lower_im: Vec<f64>,
    /// Rank kept by the truncated SVD of the frequency channel.
    pub rank: usize,
    pub residual_rms: f64,
    pub samples: usize,
    /// `|ε_fit − ε| / ε` against a reference frequency, when given.
    pub epsilon_deviation: Option<f64>,
}

/// Relative singular-value cut-off of the frequency-channel least squares.
pub const FIT_RCOND: f64 = 1e-3;

/// Fits `ż = iεz + Σ_{k≤N} Y_k|z|^{2k} z` to a sampled trajectory through
/// `g = d/dt ln z`: `Re g = Re Y_N |z|^{2N}` and
/// `Im g = ε + Σ Im Y_k |z|^{2k}`, the latter by truncated SVD on centered columns.
pub fn fit_normal_form(times: &[f64], z: &[Complex64], n: usize, reference: Option<f64>) -> Result<NormalFormFit> {
    if times.len() != z.len() {
        return Err(Error::Dimension("normal-form series lengths differ".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("threshold order must be at least 1".into()));
    }
    if z.len() < 8 {
        return Err(Error::FitUnavailable(format!("{} samples", z.len())));
    }
    let amp_max = z.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if z.iter().any(|v| v.norm() <= NOISE_FLOOR) || amp_max < 1e-4 {
        return Err(Error::FitUnavailable("mode amplitude too small".into()));
    }
    // unwrapped ln z
    let mut logs = Vec::with_capacity(z.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for v in z {
        let mut arg = v.arg() + offset;
        if let Some(p) = prev {
            let jump = ((arg - p) / (2.0 * std::f64::consts::PI)).round();
            offset -= jump * 2.0 * std::f64::consts::PI;
            arg -= jump * 2.0 * std::f64::consts::PI;
        }
        prev = Some(arg);
        logs.push(Complex64::new(v.norm().ln(), arg));
    }
    let rows: Vec<(Complex64, f64)> = (1..z.len() - 1)
        .map(|k| {
            let g = (logs[k + 1] - logs[k - 1]) / (times[k + 1] - times[k - 1]);
            (g, z[k].norm_sqr())
        })
        .collect();
    let m = rows.len();

    // damping channel, single column |z|^{2N}
    let w: Vec<f64> = rows.iter().map(|r| r.1.powi(n as i32)).collect();
    let ww: f64 = w.iter().map(|x| x * x).sum();
    let y_re = rows.iter().zip(&w).map(|(r, x)| r.0.re * x).sum::<f64>() / ww;

    // frequency channel on centered, scaled columns |z|^{2k}
    let mean_im = rows.iter().map(|r| r.0.im).sum::<f64>() / m as f64;
    let cols: Vec<Vec<f64>> = (1..=n).map(|k| rows.iter().map(|r| r.1.powi(k as i32)).collect()).collect();
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / m as f64).collect();
    let scales: Vec<f64> = cols
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>().sqrt())
        .collect();
    // columns whose spread is round-off around their mean carry no information
    let usable: Vec<usize> = (0..n)
        .filter(|&k| scales[k] > 1e-8 * (m as f64).sqrt() * means[k].abs())
        .collect();
    let mut b = vec![0.0; n];
    let mut rank = 0;
    if !usable.is_empty() {
        let a = Mat::from_fn(m, usable.len(), |i, j| {
            let k = usable[j];
            (cols[k][i] - means[k]) / scales[k]
        });
        let rhs: Vec<f64> = rows.iter().map(|r| r.0.im - mean_im).collect();
        let svd = a
            .thin_svd()
            .map_err(|e| Error::LinearAlgebra(format!("normal-form SVD: {e:?}")))?;
        let s = svd.S().column_vector();
        let smax = (0..usable.len()).map(|i| s[i]).fold(0.0, f64::max);
        let (u, v) = (svd.U(), svd.V());
        let mut coef = vec![0.0; usable.len()];
        for i in 0..usable.len() {
            if s[i] > FIT_RCOND * smax && s[i] > 0.0 {
                rank += 1;
                let proj: f64 = (0..m).map(|r| u[(r, i)] * rhs[r]).sum::<f64>() / s[i];
                for (j, c) in coef.iter_mut().enumerate() {
                    *c += v[(j, i)] * proj;
                }
            }
        }
        for (j, &k) in usable.iter().enumerate() {
            b[k] = coef[j] / scales[k];
        }
    }
    let epsilon = mean_im - b.iter().zip(&means).map(|(bk, mu)| bk * mu).sum::<f64>();
    let residual_rms = (rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let pred_im = epsilon + (0..n).map(|k| b[k] * cols[k][i]).sum::<f64>();
            (r.0.re - y_re * w[i]).powi(2) + (r.0.im - pred_im).powi(2)
        })
        .sum::<f64>()
        / m as f64)
        .sqrt();
    Ok(NormalFormFit {
        n,
        epsilon,
        y_re,
        y_im: b[n - 1],
        lower_im: b[..n - 1].to_vec(),
        rank,
        residual_rms,
        samples: m,
        epsilon_deviation: reference.map(|e| (epsilon - e).abs() / e.abs()),
    })
}

/// Integrates `ż = iεz + Σ Y_k|z|^{2k}z` by classical RK4, returning samples every `stride` steps.
pub fn integrate_normal_form(
    epsilon: f64,
    coefficients: &[Complex64],
    z0: Complex64,
    dt: f64,
    steps: usize,
    stride: usize,
) -> (Vec<f64>, Vec<Complex64>) {
    let rhs = |z: Complex64| {
        let s = z.norm_sqr();
        let mut acc = Complex64::new(0.0, epsilon);
        let mut pow = 1.0;
        for y in coefficients {
            pow *= s;
            acc += y * pow;
        }
        acc * z
    };
    let stride = stride.max(1);
    let mut z = z0;
    let (mut ts, mut zs) = (vec![0.0], vec![z0]);
    for k in 1..=steps {
        let k1 = rhs(z);
        let k2 = rhs(z + k1 * (0.5 * dt));
        let k3 = rhs(z + k2 * (0.5 * dt));
        let k4 = rhs(z + k3 * dt);
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if k % stride == 0 {
            ts.push(k as f64 * dt);
            zs.push(z);
        }
    }
    (ts, zs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterDynamics {
    pub omega_fit: Option<f64>,
    pub omega_pred: f64,
    pub ratio: Option<f64>,
    pub crossings: usize,
    pub amplitude: f64,
    pub mean_center: f64,
    /// `max_t |λ(t) − λ(0)| / λ(0)`.
    pub lambda_drift: f64,
    /// Set when fewer than three mean crossings were seen.
    pub non_oscillatory: bool,
}

/// Harmonic center frequency `ω = h√(2V″(0))` implied by `½ȧ = p`, `ṗ = −h²V′(a)`.
pub fn predicted_center_frequency(model: &ModelSpec) -> f64 {
    let v2 = model.potential.second_derivative(0.0);
    if v2 > 0.0 {
        model.h * (2.0 * v2).sqrt()
    } else {
        f64::NAN
    }
}

/// Oscillation frequency of the center from mean crossings, and the `λ` drift.
pub fn effective_dynamics(times: &[f64], centers: &[f64], lambdas: &[f64], model: &ModelSpec) -> Result<CenterDynamics> {
    if times.len() != centers.len() || times.len() != lambdas.len() {
        return Err(Error::Dimension("center series lengths differ".into()));
    }
    if times.len() < 3 {
        return Err(Error::FitUnavailable(format!("{} samples", times.len())));
    }
    let mean = centers.iter().sum::<f64>() / centers.len() as f64;
    let amplitude = centers.iter().map(|a| (a - mean).abs()).fold(0.0, f64::max);
    let mut crossings = Vec::new();
    for k in 1..times.len() {
        let (a, b) = (centers[k - 1] - mean, centers[k] - mean);
        if a != b && ((a <= 0.0 && b > 0.0) || (a >= 0.0 && b < 0.0)) {
            crossings.push(times[k - 1] + (times[k] - times[k - 1]) * a / (a - b));
        }
    }
    let non_oscillatory = crossings.len() < 3 || amplitude <= 1e-8;
    let omega_fit = (!non_oscillatory).then(|| {
        let span = crossings[crossings.len() - 1] - crossings[0];
        std::f64::consts::PI * (crossings.len() - 1) as f64 / span
    });
    let omega_pred = predicted_center_frequency(model);
    let l0 = lambdas[0];
    let lambda_drift = lambdas.iter().map(|l| (l - l0).abs()).fold(0.0, f64::max) / l0.abs();
    Ok(CenterDynamics {
        omega_fit,
        omega_pred,
        ratio: omega_fit.map(|w| w / omega_pred),
        crossings: crossings.len(),
        amplitude,
        mean_center: mean,
        lambda_drift,
        non_oscillatory,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackOptions {
    /// Linearization frequency at the initial `λ`.
    pub epsilon: f64,
    pub threshold_order: usize,
    /// Envelope fits start here; `5/ε` by default.
    pub transient: f64,
    /// Minimum fraction of successful decompositions for fits.
    pub min_success: f64,
}

impl TrackOptions {
    pub fn new(epsilon: f64, threshold_order: usize) -> Self {
        Self {
            epsilon,
            threshold_order,
            transient: 5.0 / epsilon,
            min_success: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchyPoint {
    pub t: f64,
    /// `sup_{s>t} |λ(s) − λ(t)|`.
    pub tail_sup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSeries {
    pub samples: Vec<TrackSample>,
    pub attempted: usize,
    pub failures: Vec<TrackFailure>,
    pub success_ratio: f64,
    pub options: TrackOptions,
    pub envelope_z: Option<EnvelopeFit>,
    pub envelope_r: Option<EnvelopeFit>,
    pub lambda_inf: Option<f64>,
    pub lambda_cauchy: Vec<CauchyPoint>,
    pub normal_form: Option<NormalFormFit>,
    /// RMS gap between `|z|` and the fitted normal form integrated from the first sample.
    pub normal_form_mismatch: Option<f64>,
    /// Reasons why fits are missing.
    pub flags: Vec<String>,
}

/// Fits envelopes, the normal form and the `λ` Cauchy diagnostic to tracked samples.
pub fn track(samples: Vec<TrackSample>, attempted: usize, failures: Vec<TrackFailure>, options: &TrackOptions) -> TrackSeries {
    let success_ratio = if attempted > 0 {
        samples.len() as f64 / attempted as f64
    } else {
        0.0
    };
    let mut flags = Vec::new();
    let mut series = TrackSeries {
        samples,
        attempted,
        failures,
        success_ratio,
        options: *options,
        envelope_z: None,
        envelope_r: None,
        lambda_inf: None,
        lambda_cauchy: Vec::new(),
        normal_form: None,
        normal_form_mismatch: None,
        flags: Vec::new(),
    };
    if success_ratio < options.min_success {
        flags.push(format!(
            "fit-unavailable: {:.0}% of decompositions succeeded",
            100.0 * success_ratio
        ));
        series.flags = flags;
        return series;
    }
    let s = &series.samples;
    let t: Vec<f64> = s.iter().map(|x| x.t).collect();
    let abs_z: Vec<f64> = s.iter().map(|x| x.abs_z).collect();
    let wr: Vec<f64> = s.iter().map(|x| x.wnorm_r).collect();
    match fit_envelope(&t, &abs_z, options.transient) {
        Ok(f) => series.envelope_z = Some(f),
        Err(e) => flags.push(format!("envelope |z|: {e}")),
    }
    match fit_envelope(&t, &wr, options.transient) {
        Ok(f) => series.envelope_r = Some(f),
        Err(e) => flags.push(format!("envelope R: {e}")),
    }
    if !s.is_empty() {
        let tail = &s[s.len() - (s.len() / 10).max(1)..];
        series.lambda_inf = Some(tail.iter().map(|x| x.lambda).sum::<f64>() / tail.len() as f64);
        let stride = (s.len() / 10).max(1);
        series.lambda_cauchy = (0..s.len())
            .step_by(stride)
            .map(|i| CauchyPoint {
                t: s[i].t,
                tail_sup: s[i..]
                    .iter()
                    .map(|x| (x.lambda - s[i].lambda).abs())
                    .fold(0.0, f64::max),
            })
            .collect();
    }
    let z: Vec<Complex64> = s.iter().map(|x| Complex64::new(x.z1, -x.z2)).collect();
    match fit_normal_form(&t, &z, options.threshold_order, Some(options.epsilon)) {
        Ok(fit) => {
            let mut coeffs: Vec<Complex64> = fit.lower_im.iter().map(|&b| Complex64::new(0.0, b)).collect();
            coeffs.push(Complex64::new(fit.y_re, fit.y_im));
            let dt = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            if dt.is_finite() && dt > 0.0 {
                let sub = 10;
                let h = dt / sub as f64;
                let steps = ((t[t.len() - 1] - t[0]) / h).round() as usize;
                let (mt, mz) = integrate_normal_form(fit.epsilon, &coeffs, z[0], h, steps, 1);
                let mut acc = 0.0;
                for (ti, zi) in t.iter().zip(&z) {
                    let k = (((ti - t[0]) / h).round() as usize).min(mt.len() - 1);
                    acc += (mz[k].norm() - zi.norm()).powi(2);
                }
                series.normal_form_mismatch = Some((acc / t.len() as f64).sqrt());
            }
            series.normal_form = Some(fit);
        }
        Err(e) => flags.push(format!("normal form: {e}")),
    }
    series.flags = flags;
    series
}

impl TrackSeries {
    /// Columns `t, lambda, gamma, z1, z2, abs_z, wnorm_R, a, p`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(
            w,
            &["t", "lambda", "gamma", "z1", "z2", "abs_z", "wnorm_R", "a", "p"],
            self.samples
                .iter()
                .map(|s| vec![s.t, s.lambda, s.gamma, s.z1, s.z2, s.abs_z, s.wnorm_r, s.a, s.p]),
        )
    }

    pub fn summary(&self, center: Option<&CenterDynamics>) -> TrackSummary {
        TrackSummary {
            lambda_inf: self.lambda_inf,
            alpha_fit: self.envelope_z.map(|f| f.alpha),
            ci: self.envelope_z.map(|f| f.ci),
            eps_fit: self.normal_form.as_ref().map(|f| f.epsilon),
            y_n_fit: self.normal_form.as_ref().map(|f| [f.y_re, f.y_im]),
            omega_fit: center.and_then(|c| c.omega_fit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub lambda_inf: Option<f64>,
    pub alpha_fit: Option<f64>,
    pub ci: Option<f64>,
    pub eps_fit: Option<f64>,
    #[serde(rename = "Y_N_fit")]
    pub y_n_fit: Option<[f64; 2]>,
    pub omega_fit: Option<f64>,
}
