//! Linearization about a ground state: `L₋`, `L₊`, the block operator
//! `L = [[0, L₋], [−L₊, 0]]`, its near-zero spectrum, the continuous-spectrum
//! projector, limiting-absorption resolvents and the threshold order.
//!
//! Block vectors are stored as `2n` samples `(u, v)` with `ψ ≅ u + iv`; they are
//! complex so that eigenvectors such as `(ξ, iη)` and complex shifts fit.

use faer::linalg::solvers::PartialPivLu;
use faer::prelude::*;
use faer::{c64, Mat};
use log::{debug, warn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{dot_real, norm_real, second_derivative_matrix, second_derivative_stencil, Grid1D, Spectral};
use crate::groundstate::{canonical_seed, lambda_derivative, SolitonProfile, LAMBDA_STEP};
use crate::model::ModelSpec;

/// Ritz residual required for eigenpairs inside the gap.
pub const RITZ_TOL: f64 = 1e-9;
pub const MAX_SUBSPACE_ITERATIONS: usize = 300;
/// `ε²` values with `|ε²| ≤ ZERO_TOL·λ²` are treated as zero modes.
pub const ZERO_TOL: f64 = 1e-8;
pub const THRESHOLD_DEGENERACY_TOL: f64 = 1e-9;
/// Resolvent solutions amplifying the right-hand side beyond this are treated as singular.
pub const SINGULAR_GROWTH: f64 = 1e10;

/// Dense linearized operator about a ground state.
pub struct BlockOperator {
    pub model: ModelSpec,
    pub grid: Grid1D,
    pub lambda: f64,
    pub h: f64,
    pub phi: Vec<f64>,
    /// `∂_λφ` by central difference.
    pub dlambda_phi: Vec<f64>,
    pub l_minus: Mat<f64>,
    pub l_plus: Mat<f64>,
    diag_minus: Vec<f64>,
    diag_plus: Vec<f64>,
    spectral: Spectral,
}

impl std::fmt::Debug for BlockOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockOperator")
            .field("grid", &self.grid)
            .field("lambda", &self.lambda)
            .field("h", &self.h)
            .finish()
    }
}

/// Builds `L₋`, `L₊` about `profile`; `∂_λφ` comes from two neighbouring solves.
pub fn assemble(model: &ModelSpec, profile: &SolitonProfile, grid: &Grid1D) -> Result<BlockOperator> {
    if !profile.grid.same_as(grid) {
        return Err(Error::Dimension("profile and operator grids differ".into()));
    }
    let dlambda = lambda_derivative(model, grid, profile, LAMBDA_STEP)?;
    assemble_with_derivative(model, profile, dlambda)
}

/// As [`assemble`] with a caller-supplied `∂_λφ`.
pub fn assemble_with_derivative(
    model: &ModelSpec,
    profile: &SolitonProfile,
    dlambda_phi: Vec<f64>,
) -> Result<BlockOperator> {
    let grid = profile.grid;
    let n = grid.n();
    if dlambda_phi.len() != n {
        return Err(Error::Dimension("d_lambda phi length".into()));
    }
    if profile.residual > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "profile residual {:.3e} too large to linearize about",
            profile.residual
        )));
    }
    let nl = &model.nonlinearity;
    let mut diag_minus = Vec::with_capacity(n);
    let mut diag_plus = Vec::with_capacity(n);
    for (j, &p) in profile.profile.iter().enumerate() {
        let s = p * p;
        let base = model.lambda + model.scaled_potential(grid.x(j)) - nl.f(s);
        diag_minus.push(base);
        diag_plus.push(base - 2.0 * nl.df(s) * s);
    }
    let d2 = second_derivative_matrix(&grid);
    let l_minus = Mat::from_fn(n, n, |i, j| -d2[(i, j)] + if i == j { diag_minus[i] } else { 0.0 });
    let l_plus = Mat::from_fn(n, n, |i, j| -d2[(i, j)] + if i == j { diag_plus[i] } else { 0.0 });
    Ok(BlockOperator {
        model: model.clone(),
        grid,
        lambda: model.lambda,
        h: model.h,
        phi: profile.profile.clone(),
        dlambda_phi,
        l_minus,
        l_plus,
        diag_minus,
        diag_plus,
        spectral: Spectral::new(grid),
    })
}

fn matvec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let col = Mat::from_fn(x.len(), 1, |i, _| x[i]);
    let y = a * &col;
    (0..a.nrows()).map(|i| y[(i, 0)]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BlockOperator {
    pub fn n(&self) -> usize {
        self.grid.n()
    }

    fn apply_with(&self, diag: &[f64], v: &[f64]) -> Vec<f64> {
        let d2 = self.spectral.derivative_real(v, 2);
        v.iter()
            .zip(&d2)
            .zip(diag)
            .map(|((&x, &dd), &c)| -dd + c * x)
            .collect()
    }

    /// `L₋ v`, transform-based.
    pub fn apply_l_minus(&self, v: &[f64]) -> Vec<f64> {
        self.apply_with(&self.diag_minus, v)
    }

    /// `L₊ v`, transform-based.
    pub fn apply_l_plus(&self, v: &[f64]) -> Vec<f64> {
        self.apply_with(&self.diag_plus, v)
    }

    /// `L(u, v) = (L₋v, −L₊u)` for complex block vectors.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = self.n();
        let (u, v) = x.split_at(n);
        let part = |w: &[Complex64], f: &dyn Fn(&[f64]) -> Vec<f64>| {
            let re: Vec<f64> = w.iter().map(|c| c.re).collect();
            let im: Vec<f64> = w.iter().map(|c| c.im).collect();
            f(&re)
                .into_iter()
                .zip(f(&im))
                .map(|(a, b)| Complex64::new(a, b))
                .collect::<Vec<_>>()
        };
        let top = part(v, &|w| self.apply_l_minus(w));
        let bottom = part(u, &|w| self.apply_l_plus(w));
        top.into_iter().chain(bottom.into_iter().map(|c| -c)).collect()
    }

    pub fn block_matrix(&self) -> Mat<f64> {
        let n = self.n();
        Mat::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
            (true, false) => self.l_minus[(i, j - n)],
            (false, true) => -self.l_plus[(i - n, j)],
            _ => 0.0,
        })
    }

    /// `‖L₋φ‖ / ‖φ‖`.
    pub fn kernel_residual(&self) -> f64 {
        let dx = self.grid.dx();
        norm_real(&self.apply_l_minus(&self.phi), dx) / norm_real(&self.phi, dx)
    }

    /// `‖L₊∂_λφ + φ‖ / ‖φ‖`.
    pub fn associated_residual(&self) -> f64 {
        let dx = self.grid.dx();
        let r: Vec<f64> = self
            .apply_l_plus(&self.dlambda_phi)
            .iter()
            .zip(&self.phi)
            .map(|(a, b)| a + b)
            .collect();
        norm_real(&r, dx) / norm_real(&self.phi, dx)
    }

    /// True when `V_h` is constant, so translations add a second zero pair.
    pub fn translation_invariant(&self) -> bool {
        self.h == 0.0 || matches!(self.model.potential, crate::model::Potential::Zero)
    }

    /// `∂_xφ`.
    pub fn dx_phi(&self) -> Vec<f64> {
        self.spectral.derivative_real(&self.phi, 1)
    }

    /// Symmetry defects `max|A − Aᵀ|` of `L₋` and `L₊`.
    pub fn symmetry_defect(&self) -> (f64, f64) {
        let n = self.n();
        let defect = |a: &Mat<f64>| {
            let mut m = 0.0f64;
            for i in 0..n {
                for j in 0..i {
                    m = m.max((a[(i, j)] - a[(j, i)]).abs());
                }
            }
            m
        };
        (defect(&self.l_minus), defect(&self.l_plus))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralValue {
    pub re: f64,
    pub im: f64,
    pub mult: usize,
}

/// Internal mode `L(ξ, iη) = iε(ξ, iη)` with `⟨ξ,ξ⟩ = 1`, `η = L₊ξ/ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct InternalMode {
    pub epsilon: f64,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    /// `‖L₋L₊ξ − ε²ξ‖`.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlaps {
    /// Cosine between ξ and `∂_xφ₀`.
    pub xi_vs_dphi0: Option<f64>,
    /// Cosine between η and `−xφ₀`.
    pub eta_vs_xphi0: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbStatus {
    Pass,
    Suspect,
    Unresolved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationReport {
    pub lambda: f64,
    pub h: f64,
    pub epsilon: f64,
    pub gap_edge: f64,
    pub eigenvalues: Vec<SpectralValue>,
    pub sa_flag: bool,
    pub sb_margin: f64,
    pub sb_status: SbStatus,
    #[serde(rename = "N")]
    pub threshold_order: Option<usize>,
    pub overlaps: Overlaps,
    /// Discrete eigenvalues of `L` in the closed gap, counted with multiplicity.
    pub discrete_count: usize,
    /// Positive frequencies of all internal modes, ascending.
    pub gap_frequencies: Vec<f64>,
    /// `ε²` with `ε² < 0` signal a real (unstable) eigenvalue pair.
    pub unstable: Vec<f64>,
    pub iterations: usize,
    pub max_ritz_residual: f64,
    #[serde(skip)]
    pub modes: Vec<InternalMode>,
}

impl LinearizationReport {
    /// The mode with the smallest positive frequency.
    pub fn principal(&self) -> Option<&InternalMode> {
        self.modes.first()
    }
}

struct RitzPair {
    theta: f64,
    vector: Vec<f64>,
    residual: f64,
}

/// Smallest eigenvalues of `M = L₋L₊` by shift-invert subspace iteration.
///
/// The zero mode `∂_λφ` is deflated obliquely with its left partner `φ`
/// (and `∂_xφ` with `xφ` when translations are symmetries); the deflation
/// commutes with `M`. Values are refined with the quotient
/// `⟨L₊x, Mx⟩ / ⟨L₊x, x⟩`, exact to second order because `L₊M` is symmetric.
fn product_eigenpairs(op: &BlockOperator, count: usize, m: &Mat<f64>) -> Result<(Vec<RitzPair>, usize)> {
    let n = op.n();
    let lam2 = op.lambda * op.lambda;
    let sigma = -1e-3 * lam2;
    let p = (count + count.max(4)).min(n);
    let shifted = Mat::from_fn(n, n, |i, j| m[(i, j)] - if i == j { sigma } else { 0.0 });
    let lu = shifted.partial_piv_lu();

    // (right, left) kernel pairs of M; cross pairings vanish by parity
    let mut kernel = vec![(op.dlambda_phi.clone(), op.phi.clone())];
    if op.translation_invariant() {
        let xphi: Vec<f64> = op.grid.nodes().iter().zip(&op.phi).map(|(x, p)| x * p).collect();
        kernel.push((op.dx_phi(), xphi));
    }
    for (right, left) in &kernel {
        let pairing = dot(left, right);
        if pairing.abs() < 1e-12 * dot(left, left).sqrt() * dot(right, right).sqrt() {
            return Err(Error::Conditioning {
                condition: f64::INFINITY,
            });
        }
    }
    let deflate = |x: &mut Mat<f64>| {
        for (right, left) in &kernel {
            let pairing = dot(left, right);
            for j in 0..x.ncols() {
                let c = (0..n).map(|i| left[i] * x[(i, j)]).sum::<f64>() / pairing;
                for i in 0..n {
                    x[(i, j)] -= c * right[i];
                }
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = Mat::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5);
    deflate(&mut x);
    let mut q = x.qr().compute_thin_Q();

    let mut pairs = Vec::new();
    for iteration in 1..=MAX_SUBSPACE_ITERATIONS {
        let mut y = lu.solve(&q);
        deflate(&mut y);
        q = y.qr().compute_thin_Q();
        let mq = m * &q;
        let hmat = q.transpose() * &mq;
        let eig = hmat
            .eigen()
            .map_err(|e| Error::LinearAlgebra(format!("Ritz eigensolve: {e:?}")))?;
        let s = eig.S().column_vector();
        let w = eig.U();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| s[a].re.total_cmp(&s[b].re));

        pairs.clear();
        let mut converged = true;
        for &k in order.iter().take(count) {
            // real part of the Ritz vector carries the real eigenvector
            let mut v: Vec<f64> = (0..n)
                .map(|i| (0..p).map(|l| q[(i, l)] * w[(l, k)].re).sum())
                .collect();
            if norm_real(&v, 1.0) < 1e-8 {
                v = (0..n)
                    .map(|i| (0..p).map(|l| q[(i, l)] * w[(l, k)].im).sum())
                    .collect();
            }
            let nv = norm_real(&v, 1.0);
            v.iter_mut().for_each(|c| *c /= nv);
            let lp = matvec(&op.l_plus, &v);
            let mv = matvec(&op.l_minus, &lp);
            let denom = dot(&lp, &v);
            let theta = if denom.abs() > 1e-14 { dot(&lp, &mv) / denom } else { s[k].re };
            let residual = norm_real(
                &mv.iter().zip(&v).map(|(a, b)| a - theta * b).collect::<Vec<_>>(),
                1.0,
            );
            let tol = if theta < lam2 { RITZ_TOL } else { 1e-6 * lam2 };
            if !(residual <= tol) || s[k].im.abs() > 1e-8 * lam2.max(s[k].re.abs()) {
                converged = false;
            }
            pairs.push(RitzPair {
                theta,
                vector: v,
                residual,
            });
        }
        if converged {
            debug!("subspace iteration converged in {iteration} steps");
            return Ok((pairs, iteration));
        }
    }
    let worst = pairs.iter().map(|p| p.residual).fold(0.0, f64::max);
    let gap_ok = pairs.iter().filter(|p| p.theta < lam2).all(|p| p.residual <= RITZ_TOL);
    if gap_ok {
        warn!("continuum Ritz values unconverged after {MAX_SUBSPACE_ITERATIONS} steps (residual {worst:.3e})");
        return Ok((pairs, MAX_SUBSPACE_ITERATIONS));
    }
    Err(Error::NoConvergence {
        stage: "shift-invert subspace iteration".into(),
        iterations: MAX_SUBSPACE_ITERATIONS,
        residual: worst,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Near-zero spectrum of `L(λ)`.
///
/// `count` is the number of `ε²` values sought; it is doubled (up to 64)
/// while all of them still lie in the gap, so every gap mode is found.
pub fn near_zero_spectrum(op: &BlockOperator, count: usize) -> Result<LinearizationReport> {
    let lam = op.lambda;
    let lam2 = lam * lam;
    let dx = op.grid.dx();
    let m = &op.l_minus * &op.l_plus;

    let mut count = count.max(1);
    let (pairs, iterations) = loop {
        let (pairs, it) = product_eigenpairs(op, count, &m)?;
        let saturated = pairs.iter().all(|p| p.theta < lam2);
        if !saturated || count >= 64 || count >= op.n() / 4 {
            break (pairs, it);
        }
        count *= 2;
    };

    let dphi = op.dx_phi();
    let mut modes = Vec::new();
    let mut zero_modes = usize::from(op.translation_invariant());
    let mut unstable = Vec::new();
    for pair in &pairs {
        if pair.theta.abs() <= ZERO_TOL * lam2 {
            zero_modes += 1;
        } else if pair.theta < 0.0 {
            unstable.push(pair.theta);
        } else if pair.theta < lam2 {
            let eps = pair.theta.sqrt();
            let mut xi = pair.vector.clone();
            let nrm = norm_real(&xi, dx);
            let mut sign = dot(&xi, &dphi);
            if sign.abs() < 1e-8 * norm_real(&xi, 1.0) * norm_real(&dphi, 1.0) {
                sign = xi.iter().cloned().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
            }
            let scale = sign.signum() / nrm;
            xi.iter_mut().for_each(|v| *v *= scale);
            let eta: Vec<f64> = matvec(&op.l_plus, &xi).into_iter().map(|v| v / eps).collect();
            modes.push(InternalMode {
                epsilon: eps,
                xi,
                eta,
                residual: pair.residual,
            });
        }
    }
    modes.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));

    let mut eigenvalues = vec![SpectralValue {
        re: 0.0,
        im: 0.0,
        mult: 2 + 2 * zero_modes,
    }];
    for mode in &modes {
        eigenvalues.push(SpectralValue { re: 0.0, im: mode.epsilon, mult: 1 });
        eigenvalues.push(SpectralValue { re: 0.0, im: -mode.epsilon, mult: 1 });
    }
    for &t in &unstable {
        let r = (-t).sqrt();
        eigenvalues.push(SpectralValue { re: r, im: 0.0, mult: 1 });
        eigenvalues.push(SpectralValue { re: -r, im: 0.0, mult: 1 });
    }
    let discrete_count = eigenvalues.iter().map(|e| e.mult).sum();

    let epsilon = modes.first().map_or(0.0, |m| m.epsilon);
    let overlaps = match (modes.first(), op.model.shifted_lambda() > 0.0) {
        (Some(mode), true) => {
            let phi0 = canonical_seed(&op.model, &op.grid)?;
            let dphi0 = op.spectral.derivative_real(&phi0.profile, 1);
            let xphi0: Vec<f64> = op
                .grid
                .nodes()
                .iter()
                .zip(&phi0.profile)
                .map(|(x, p)| -x * p)
                .collect();
            Overlaps {
                xi_vs_dphi0: Some(cosine(&mode.xi, &dphi0)),
                eta_vs_xphi0: Some(cosine(&mode.eta, &xphi0)),
            }
        }
        _ => Overlaps {
            xi_vs_dphi0: None,
            eta_vs_xphi0: None,
        },
    };

    let (sb_margin, sb_status) = threshold_proxy(op, &modes);
    let threshold_order = if epsilon > 0.0 {
        compute_threshold_order(epsilon, lam).ok().map(|t| t.n)
    } else {
        None
    };
    let max_ritz_residual = pairs
        .iter()
        .filter(|p| p.theta < lam2)
        .map(|p| p.residual)
        .fold(0.0, f64::max);

    Ok(LinearizationReport {
        lambda: lam,
        h: op.h,
        epsilon,
        gap_edge: lam,
        eigenvalues,
        sa_flag: discrete_count == 4 && epsilon > 0.0,
        sb_margin,
        sb_status,
        threshold_order,
        overlaps,
        discrete_count,
        gap_frequencies: modes.iter().map(|m| m.epsilon).collect(),
        unstable,
        iterations,
        max_ritz_residual,
        modes,
    })
}

/// Polishes an internal mode of the ground state `profile` by inverse
/// iteration on `L₋L₊` restricted to odd functions, shifted at `guess.epsilon²`.
///
/// Odd samples are `x₁ … x_{n/2−1}`; the samples at `x = 0` and `x = −L/2`
/// vanish. Much cheaper than [`near_zero_spectrum`] once a nearby mode is
/// known, e.g. from a neighbouring `λ`.
pub fn refine_internal_mode(model: &ModelSpec, profile: &SolitonProfile, guess: &InternalMode) -> Result<InternalMode> {
    let grid = profile.grid;
    let n = grid.n();
    if guess.xi.len() != n {
        return Err(Error::Dimension("guess mode length".into()));
    }
    let half = n / 2;
    let m = half - 1;
    let c = second_derivative_stencil(&grid);
    let nl = &model.nonlinearity;
    let (mut dm, mut dp) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for i in 1..half {
        let s = profile.profile[i] * profile.profile[i];
        let base = model.lambda + model.scaled_potential(grid.x(i)) - nl.f(s);
        dm.push(base);
        dp.push(base - 2.0 * nl.df(s) * s);
    }
    let fold = |diag: &[f64]| {
        Mat::from_fn(m, m, |a, b| {
            let (i, k) = (a + 1, b + 1);
            let v = -c[(i + n - k) % n] + c[(i + k) % n];
            if a == b { v + diag[a] } else { v }
        })
    };
    let a_minus = fold(&dm);
    let a_plus = fold(&dp);
    let prod = &a_minus * &a_plus;
    let sigma = guess.epsilon * guess.epsilon;
    let lu = Mat::from_fn(m, m, |i, j| prod[(i, j)] - if i == j { sigma } else { 0.0 }).partial_piv_lu();

    let scale = sigma.max(model.lambda * model.lambda);
    let mut x = Mat::from_fn(m, 1, |i, _| 0.5 * (guess.xi[i + 1] - guess.xi[n - 1 - i]));
    let mut theta = sigma;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_REFINE_ITERATIONS {
        let y = lu.solve(&x);
        let ny = y.norm_l2();
        if !ny.is_finite() || ny == 0.0 {
            return Err(Error::LinearAlgebra("odd inverse iteration broke down".into()));
        }
        x = y * (1.0 / ny);
        let lp = &a_plus * &x;
        let mx = &a_minus * &lp;
        let denom = (lp.transpose() * &x)[(0, 0)];
        theta = (lp.transpose() * &mx)[(0, 0)] / denom;
        residual = (&mx - &x * theta).norm_l2();
        if residual <= REFINE_TOL * scale {
            break;
        }
    }
    if !(residual <= 1e3 * REFINE_TOL * scale) || !(theta > 0.0) {
        return Err(Error::NoConvergence {
            stage: "internal mode refinement".into(),
            iterations: MAX_REFINE_ITERATIONS,
            residual,
        });
    }
    let mut xi = vec![0.0; n];
    for i in 1..half {
        xi[i] = x[(i - 1, 0)];
        xi[n - i] = -x[(i - 1, 0)];
    }
    let spectral = Spectral::new(grid);
    let dphi = spectral.derivative_real(&profile.profile, 1);
    let nrm = norm_real(&xi, grid.dx());
    let sign = if dot(&xi, &dphi) < 0.0 { -1.0 } else { 1.0 };
    xi.iter_mut().for_each(|v| *v *= sign / nrm);
    let eps = theta.sqrt();
    let d2 = spectral.derivative_real(&xi, 2);
    let eta = (0..n)
        .map(|j| {
            let s = profile.profile[j] * profile.profile[j];
            let diag = model.lambda + model.scaled_potential(grid.x(j)) - nl.f(s) - 2.0 * nl.df(s) * s;
            (-d2[j] + diag * xi[j]) / eps
        })
        .collect();
    Ok(InternalMode {
        epsilon: eps,
        xi,
        eta,
        residual,
    })
}

/// Residual target for [`refine_internal_mode`], relative to `max(ε², λ²)`.
pub const REFINE_TOL: f64 = 1e-12;
pub const MAX_REFINE_ITERATIONS: usize = 40;

/// Threshold proximity of the highest gap mode in units of `(π/L)²`, plus a
/// decay test of its profile at the box edge.
fn threshold_proxy(op: &BlockOperator, modes: &[InternalMode]) -> (f64, SbStatus) {
    let spacing = (PI / op.grid.length()).powi(2);
    let Some(top) = modes.last() else {
        return (op.lambda / spacing, SbStatus::Pass);
    };
    let margin = (op.lambda - top.epsilon) / spacing;
    let peak = top.xi.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let edge = top.xi[0].abs();
    let decaying = edge <= 1e-3 * peak;
    let status = if margin < 0.25 || !decaying {
        SbStatus::Suspect
    } else if margin >= 0.5 {
        SbStatus::Pass
    } else {
        SbStatus::Unresolved
    };
    (margin, status)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub sa_pass: bool,
    pub discrete_count: usize,
    /// No gap mode other than `±iε` below `λ − ε/2`.
    pub isolated: bool,
    pub sb_margin: f64,
    pub sb_status: SbStatus,
}

pub fn condition_diagnostics(report: &LinearizationReport) -> ConditionFlags {
    let eps = report.epsilon;
    let isolated = report
        .gap_frequencies
        .iter()
        .skip(1)
        .all(|&nu| nu >= report.lambda - 0.5 * eps)
        && report.unstable.is_empty();
    ConditionFlags {
        sa_pass: report.sa_flag,
        discrete_count: report.discrete_count,
        isolated,
        sb_margin: report.sb_margin,
        sb_status: report.sb_status,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdOrder {
    pub n: usize,
}

impl ThresholdOrder {
    /// Pairs with `|m − n| ≤ N` are non-resonant.
    pub fn is_resonant(&self, m: usize, n: usize) -> bool {
        m.abs_diff(n) > self.n
    }
}

/// Smallest positive `N` with `ε(N+1) > λ`.
pub fn compute_threshold_order(epsilon: f64, lambda: f64) -> Result<ThresholdOrder> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon = {epsilon} must be positive")));
    }
    let ratio = lambda / epsilon;
    let nearest = ratio.round();
    if nearest >= 2.0 && (epsilon * nearest - lambda).abs() <= THRESHOLD_DEGENERACY_TOL {
        return Err(Error::DegenerateThreshold { epsilon, lambda });
    }
    let n = (ratio.floor() as usize).max(1);
    Ok(ThresholdOrder { n })
}

/// Continuous-spectrum projector `P_c = I − E (FᵀE)⁻¹ Fᵀ`.
///
/// Right basis `E`: `(0,φ)`, `(∂_λφ,0)`, `(ξ,0)`, `(0,η)`; left basis `F`:
/// `(φ,0)`, `(0,∂_λφ)`, `(η,0)`, `(0,ξ)`. Without an internal mode the
/// translation pair `(∂_xφ,0)`, `(0,xφ)` takes its place.
#[derive(Clone, Debug)]
pub struct SpectralProjector {
    n: usize,
    right: Vec<Vec<f64>>,
    left: Vec<Vec<f64>>,
    gram_inv: Mat<f64>,
    pub condition: f64,
}

pub fn spectral_projection_pc(op: &BlockOperator, report: &LinearizationReport) -> Result<SpectralProjector> {
    let n = op.n();
    let zeros = vec![0.0; n];
    let block = |u: &[f64], v: &[f64]| -> Vec<f64> {
        let mut out = u.to_vec();
        out.extend_from_slice(v);
        let s = norm_real(&out, 1.0);
        out.iter_mut().for_each(|c| *c /= s);
        out
    };
    let phi = &op.phi;
    let dl = &op.dlambda_phi;
    let (a, b) = match report.principal() {
        Some(mode) => (mode.xi.clone(), mode.eta.clone()),
        None => {
            let dphi = op.dx_phi();
            let xphi: Vec<f64> = op.grid.nodes().iter().zip(phi).map(|(x, p)| x * p).collect();
            (dphi, xphi)
        }
    };
    let right = vec![
        block(&zeros, phi),
        block(dl, &zeros),
        block(&a, &zeros),
        block(&zeros, &b),
    ];
    let left = vec![block(phi, &zeros), block(&zeros, dl), block(&b, &zeros), block(&zeros, &a)];
    let gram = Mat::from_fn(4, 4, |i, j| dot(&left[i], &right[j]));
    let sv = gram
        .singular_values()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e10) {
        return Err(Error::Conditioning { condition });
    }
    let gram_inv = gram.partial_piv_lu().solve(Mat::<f64>::identity(4, 4));
    Ok(SpectralProjector {
        n,
        right,
        left,
        gram_inv,
        condition,
    })
}

impl SpectralProjector {
    /// Riesz projection onto the discrete subspace.
    pub fn discrete_part(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), 2 * self.n, "block vector length");
        let coeffs: Vec<Complex64> = self
            .left
            .iter()
            .map(|f| f.iter().zip(x).map(|(a, b)| b * *a).sum())
            .collect();
        let mut out = vec![Complex64::new(0.0, 0.0); 2 * self.n];
        for (i, e) in self.right.iter().enumerate() {
            let c: Complex64 = (0..4).map(|j| coeffs[j] * self.gram_inv[(i, j)]).sum();
            for (o, v) in out.iter_mut().zip(e) {
                *o += c * *v;
            }
        }
        out
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let d = self.discrete_part(x);
        x.iter().zip(d).map(|(a, b)| a - b).collect()
    }

    /// Dense matrix of the discrete projection.
    pub fn discrete_matrix(&self) -> Mat<f64> {
        let n2 = 2 * self.n;
        let mut p = Mat::zeros(n2, n2);
        for i in 0..4 {
            for j in 0..4 {
                let g = self.gram_inv[(i, j)];
                if g == 0.0 {
                    continue;
                }
                for r in 0..n2 {
                    let e = self.right[i][r] * g;
                    if e == 0.0 {
                        continue;
                    }
                    for c in 0..n2 {
                        p[(r, c)] += e * self.left[j][c];
                    }
                }
            }
        }
        p
    }
}

/// Factored `L − (μ + δ)` (optionally `+ P_d` to deflate the discrete part).
pub struct Resolvent {
    lu: PartialPivLu<c64>,
    shift: Complex64,
    n2: usize,
    block: Mat<c64>,
}

impl Resolvent {
    pub fn new(op: &BlockOperator, mu: Complex64, delta: f64, deflate: Option<&SpectralProjector>) -> Self {
        let l = op.block_matrix();
        let shift = mu + delta;
        let n2 = l.nrows();
        let pd = deflate.map(|p| p.discrete_matrix());
        let block = Mat::from_fn(n2, n2, |i, j| {
            let mut v = c64::new(l[(i, j)], 0.0);
            if let Some(p) = &pd {
                v += p[(i, j)];
            }
            if i == j {
                v -= shift;
            }
            v
        });
        let lu = block.partial_piv_lu();
        Self { lu, shift, n2, block }
    }

    pub fn solve(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        if rhs.len() != self.n2 {
            return Err(Error::Dimension(format!("rhs length {} vs {}", rhs.len(), self.n2)));
        }
        let b = Mat::from_fn(self.n2, 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        let sol: Vec<Complex64> = (0..self.n2).map(|i| x[(i, 0)]).collect();
        let nb = rhs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let nx = sol.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if nb == 0.0 {
            return Ok(sol);
        }
        if !nx.is_finite() || nx > SINGULAR_GROWTH * nb {
            // (A − s)x = b with x dominated by an eigenvector at s₀ gives b ≈ (s₀ − s)x
            let (num, den) = if nx.is_finite() {
                sol.iter().zip(rhs).fold((Complex64::new(0.0, 0.0), 0.0), |(a, d), (x, b)| {
                    (a + x.conj() * b, d + x.norm_sqr())
                })
            } else {
                (Complex64::new(0.0, 0.0), 1.0)
            };
            let nearest = self.shift + num / den;
            return Err(Error::SingularSystem {
                shift_re: self.shift.re,
                shift_im: self.shift.im,
                nearest_re: nearest.re,
                nearest_im: nearest.im,
            });
        }
        Ok(sol)
    }

    /// `‖(A − s)x − b‖` for the factored matrix.
    pub fn residual(&self, x: &[Complex64], rhs: &[Complex64]) -> f64 {
        let xm = Mat::from_fn(self.n2, 1, |i, _| x[i]);
        let ax = &self.block * &xm;
        (0..self.n2)
            .map(|i| (ax[(i, 0)] - rhs[i]).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Solves `(L − μ − δ)x = rhs` by a dense direct solve.
pub fn resolvent_apply(op: &BlockOperator, mu: Complex64, delta: f64, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
    Resolvent::new(op, mu, delta, None).solve(rhs)
}

/// As [`resolvent_apply`] on the range of `P_c`, with the discrete part deflated.
pub fn resolvent_apply_deflated(
    op: &BlockOperator,
    projector: &SpectralProjector,
    mu: Complex64,
    delta: f64,
    rhs: &[Complex64],
) -> Result<Vec<Complex64>> {
    let projected = projector.apply(rhs);
    Resolvent::new(op, mu, delta, Some(projector)).solve(&projected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionSweep {
    pub points: Vec<SweepPoint>,
    pub extrapolated_re: f64,
    pub extrapolated_im: f64,
    /// Level spacing of the discretized continuum at the shift; the sweep stops here.
    pub floor: f64,
    pub conclusive: bool,
}

/// Spacing `2k·(2π/L)` of discretized continuum levels near `Im μ`, `k = √(Im μ − λ)`.
pub fn continuum_level_spacing(grid: &Grid1D, lambda: f64, nu: f64) -> f64 {
    let k = (nu.abs() - lambda).max(0.0).sqrt();
    let dk = 2.0 * PI / grid.length();
    (2.0 * k * dk).max(dk * dk)
}

/// Neville extrapolation to `δ = 0` of the last (up to 4) sweep values.
pub fn extrapolate_to_zero(deltas: &[f64], values: &[Complex64]) -> Complex64 {
    let k = deltas.len().min(4);
    let xs = &deltas[deltas.len() - k..];
    let mut p: Vec<Complex64> = values[values.len() - k..].to_vec();
    for level in 1..k {
        for i in 0..k - level {
            let (xi, xj) = (xs[i], xs[i + level]);
            p[i] = (p[i + 1] * xi - p[i] * xj) / (xi - xj);
        }
    }
    p[0]
}

/// Evaluates `functional((L − μ − δ)⁻¹ rhs)` along `δ = δ₀ 2^{−k}` down to the
/// level-spacing floor and extrapolates to `δ → 0⁺`.
///
/// The sweep is conclusive when the imaginary parts keep one sign and vary monotonically.
pub fn limiting_absorption_sweep(
    op: &BlockOperator,
    mu: Complex64,
    rhs: &[Complex64],
    functional: &dyn Fn(&[Complex64]) -> Complex64,
) -> Result<AbsorptionSweep> {
    let floor = if mu.im.abs() > op.lambda {
        continuum_level_spacing(&op.grid, op.lambda, mu.im)
    } else {
        1e-4
    };
    let start = (1e-2f64).max(4.0 * floor);
    let mut deltas = Vec::new();
    let mut d = start;
    while d >= floor * (1.0 - 1e-12) && deltas.len() < 12 {
        deltas.push(d);
        d *= 0.5;
    }
    let mut values = Vec::with_capacity(deltas.len());
    for &delta in &deltas {
        let x = resolvent_apply(op, mu, delta, rhs)?;
        values.push(functional(&x));
    }
    let extrapolated = extrapolate_to_zero(&deltas, &values);
    let ims: Vec<f64> = values.iter().map(|v| v.im).collect();
    let same_sign = ims.iter().all(|v| *v < 0.0) || ims.iter().all(|v| *v > 0.0) || ims.iter().all(|v| *v == 0.0);
    let diffs: Vec<f64> = ims.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = diffs.iter().all(|d| *d <= 0.0) || diffs.iter().all(|d| *d >= 0.0);
    let conclusive = same_sign && monotone && extrapolated.im.signum() == ims.last().map_or(0.0, |v| v.signum());
    Ok(AbsorptionSweep {
        points: deltas
            .iter()
            .zip(&values)
            .map(|(&delta, v)| SweepPoint { delta, re: v.re, im: v.im })
            .collect(),
        extrapolated_re: extrapolated.re,
        extrapolated_im: extrapolated.im,
        floor,
        conclusive: conclusive || values.iter().all(|v| v.im == 0.0),
    })
}

/// `⟨σ₁x, y⟩ = ∫ conj(σ₁x)·y` with `σ₁(u, v) = (−v, u)`.
pub fn sigma1_pairing(x: &[Complex64], y: &[Complex64], dx: f64) -> Complex64 {
    let n = x.len() / 2;
    let (u, v) = x.split_at(n);
    let s: Complex64 = v
        .iter()
        .map(|c| -c)
        .chain(u.iter().cloned())
        .zip(y)
        .map(|(a, b)| a.conj() * b)
        .sum();
    s * dx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgrValue {
    pub threshold_order: usize,
    /// `Im μ = (N+1)ε`.
    pub shift: f64,
    /// `Re Y_N = Im⟨σ₁(L − μ − 0)⁻¹F, F⟩`.
    pub re_y: f64,
    pub form_re: f64,
    pub sign_ok: bool,
    pub conclusive: bool,
    pub sweep: AbsorptionSweep,
}

/// Evaluates the Fermi Golden Rule quadratic form at `μ = (N+1)iε` for a caller-supplied `F`.
pub fn fgr_quadratic_form(
    op: &BlockOperator,
    report: &LinearizationReport,
    f: &[Complex64],
    threshold_order: usize,
) -> Result<FgrValue> {
    if report.epsilon <= 0.0 {
        return Err(Error::InvalidConfig("FGR form needs an internal mode (epsilon > 0)".into()));
    }
    let shift = (threshold_order as f64 + 1.0) * report.epsilon;
    let dx = op.grid.dx();
    let functional = |x: &[Complex64]| sigma1_pairing(x, f, dx);
    let sweep = limiting_absorption_sweep(op, Complex64::new(0.0, shift), f, &functional)?;
    let re_y = sweep.extrapolated_im;
    Ok(FgrValue {
        threshold_order,
        shift,
        re_y,
        form_re: sweep.extrapolated_re,
        sign_ok: re_y < 0.0,
        conclusive: sweep.conclusive,
        sweep,
    })
}

/// Complex block vector `(u, v)` from real components.
pub fn block_vector(u: &[f64], v: &[f64]) -> Vec<Complex64> {
    u.iter()
        .chain(v)
        .map(|&a| Complex64::new(a, 0.0))
        .collect()
}

/// `(ξ, iη)`, the eigenvector of `L` at `iε`.
pub fn mode_vector(mode: &InternalMode) -> Vec<Complex64> {
    mode.xi
        .iter()
        .map(|&a| Complex64::new(a, 0.0))
        .chain(mode.eta.iter().map(|&b| Complex64::new(0.0, b)))
        .collect()
}

/// Weighted `L²` norm of a real vector on the operator grid.
pub fn grid_norm(op: &BlockOperator, v: &[f64]) -> f64 {
    dot_real(v, v, op.grid.dx()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundstate::solve_ground_state;
    use crate::model::{Nonlinearity, Potential};

    fn operator(h: f64, n: usize, length: f64) -> BlockOperator {
        let model = ModelSpec::new(
            Nonlinearity::Cubic,
            Potential::GaussianWell { depth: 0.2, width: 1.0 },
            h,
            0.25,
        )
        .unwrap();
        let grid = Grid1D::new(n, length).unwrap();
        let profile = solve_ground_state(&model, &grid).unwrap();
        assemble(&model, &profile, &grid).unwrap()
    }

    #[test]
    fn threshold_orders() {
        assert_eq!(compute_threshold_order(0.13, 0.25).unwrap().n, 1);
        assert_eq!(compute_threshold_order(0.09, 0.25).unwrap().n, 2);
        assert!(matches!(
            compute_threshold_order(0.125, 0.25),
            Err(Error::DegenerateThreshold { .. })
        ));
        assert_eq!(compute_threshold_order(0.3, 0.25).unwrap().n, 1);
        let t = compute_threshold_order(0.09, 0.25).unwrap();
        assert!(!t.is_resonant(3, 1) && t.is_resonant(4, 1));
    }

    #[test]
    fn neville_recovers_polynomial_limit() {
        let d = [0.08, 0.04, 0.02, 0.01];
        let v: Vec<Complex64> = d
            .iter()
            .map(|&x| Complex64::new(1.0 + 2.0 * x - 3.0 * x * x, -0.5 + x * x * x))
            .collect();
        let z = extrapolate_to_zero(&d, &v);
        assert!((z - Complex64::new(1.0, -0.5)).norm() < 1e-12);
    }

    #[test]
    fn operator_symmetry_and_kernel() {
        let op = operator(0.2, 256, 128.0);
        let (a, b) = op.symmetry_defect();
        assert!(a < 1e-12 && b < 1e-12);
        assert!(op.kernel_residual() <= 1e-9);
        assert!(op.associated_residual() <= 1e-6);
    }

    #[test]
    fn block_apply_matches_dense() {
        let op = operator(0.2, 128, 96.0);
        let n = op.n();
        let x: Vec<Complex64> = (0..2 * n)
            .map(|i| {
                let env = (-(((i % n) as f64 - 64.0) / 20.0).powi(2)).exp();
                Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()) * env
            })
            .collect();
        let dense = op.block_matrix();
        let y = op.apply(&x);
        for i in 0..2 * n {
            let d: Complex64 = (0..2 * n).map(|j| x[j] * dense[(i, j)]).sum();
            assert!((d - y[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn spectrum_matches_dense_block_eigensolve() {
        let op = operator(0.2, 256, 128.0);
        let report = near_zero_spectrum(&op, 4).unwrap();
        assert!(report.epsilon > 0.0 && report.epsilon < report.lambda);
        // oracle: full eigendecomposition of the 2n x 2n block matrix
        let ev = op.block_matrix().eigenvalues().unwrap();
        let mut gap: Vec<f64> = ev
            .iter()
            .filter(|z| z.re.abs() < 1e-6 && z.im > 1e-4 && z.im < op.lambda)
            .map(|z| z.im)
            .collect();
        gap.sort_by(f64::total_cmp);
        assert_eq!(gap.len(), report.gap_frequencies.len());
        for (a, b) in gap.iter().zip(&report.gap_frequencies) {
            assert!((a - b).abs() <= 1e-7 * b, "{a} vs {b}");
        }
        // quadruple symmetry of the oracle spectrum
        for z in ev.iter().filter(|z| z.norm() < op.lambda) {
            for w in [-*z, z.conj(), -z.conj()] {
                assert!(ev.iter().any(|u| (u - w).norm() < 1e-8));
            }
        }
    }

    #[test]
    fn eigenvector_relations() {
        let op = operator(0.2, 256, 128.0);
        let report = near_zero_spectrum(&op, 4).unwrap();
        let mode = report.principal().unwrap();
        let v = mode_vector(mode);
        let lv = op.apply(&v);
        let err: f64 = lv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - Complex64::new(0.0, mode.epsilon) * b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "{err}");
        assert!((grid_norm(&op, &mode.xi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_reproduces_and_tracks_the_principal_mode() {
        let op = operator(0.2, 256, 128.0);
        let report = near_zero_spectrum(&op, 4).unwrap();
        let mode = report.principal().unwrap();
        let profile = SolitonProfile {
            lambda: op.lambda,
            h: op.h,
            grid: op.grid,
            profile: op.phi.clone(),
            residual: 0.0,
            iterations: 0,
        };
        let refined = refine_internal_mode(&op.model, &profile, mode).unwrap();
        assert!((refined.epsilon - mode.epsilon).abs() <= 1e-9 * mode.epsilon);
        let diff = refined.xi.iter().zip(&mode.xi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");

        // from the neighbouring lambda, against a fresh full solve
        let model = op.model.with_lambda(0.25 * 1.02);
        let next = solve_ground_state(&model, &op.grid).unwrap();
        let moved = refine_internal_mode(&model, &next, mode).unwrap();
        let fresh = near_zero_spectrum(&assemble(&model, &next, &op.grid).unwrap(), 4).unwrap();
        assert!((moved.epsilon - fresh.epsilon).abs() <= 1e-9 * fresh.epsilon);
        let v = mode_vector(&moved);
        let full = assemble_with_derivative(&model, &next, vec![0.0; op.n()]).unwrap();
        let err: f64 = full
            .apply(&v)
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - Complex64::new(0.0, moved.epsilon) * b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn projector_properties() {
        let op = operator(0.2, 256, 128.0);
        let report = near_zero_spectrum(&op, 4).unwrap();
        let pc = spectral_projection_pc(&op, &report).unwrap();
        let v = mode_vector(report.principal().unwrap());
        let nv: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let pv: f64 = pc.apply(&v).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(pv <= 1e-8 * nv);
        let zero = block_vector(&vec![0.0; op.n()], &op.phi);
        let pz: f64 = pc.apply(&zero).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(pz <= 1e-8);
    }

    #[test]
    fn resolvent_in_gap_and_at_eigenvalue() {
        let op = operator(0.2, 128, 96.0);
        let report = near_zero_spectrum(&op, 4).unwrap();
        let n = op.n();
        let rhs: Vec<Complex64> = (0..2 * n)
            .map(|i| Complex64::new(((i % n) as f64 * 0.05).sin() * 0.1, 0.0))
            .collect();
        // between the internal mode and the gap edge
        let gap = &report.gap_frequencies;
        let mu = Complex64::new(0.0, 0.5 * (gap[0] + gap.get(1).copied().unwrap_or(op.lambda)));
        let r = Resolvent::new(&op, mu, 0.0, None);
        let x = r.solve(&rhs).unwrap();
        let nb: f64 = rhs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(r.residual(&x, &rhs) <= 1e-9 * nb.max(1.0));

        let hit = Complex64::new(0.0, report.epsilon);
        let v = mode_vector(report.principal().unwrap());
        match resolvent_apply(&op, hit, 0.0, &v) {
            Err(Error::SingularSystem { nearest_im, .. }) => {
                assert!((nearest_im - report.epsilon).abs() < 1e-6)
            }
            other => panic!("expected singular system, got {other:?}"),
        }
    }
}
