//! Periodic 1D grid, complex fields, Fourier differentiation, quadrature and
//! the conserved/diagnostic observables of the NLS flow.
//!
//! Quadrature is the uniform Riemann sum `dx * sum(...)`, which is exact for
//! trigonometric polynomials resolved by the grid.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Uniform periodic grid on `[-L/2, L/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    n: usize,
    length: f64,
}

impl Grid1D {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n = {n} must be a power of two and at least 16"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("length = {length} must be positive")));
        }
        Ok(Self { n, length })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        -0.5 * self.length + j as f64 * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Angular wavenumber of FFT bin `m` (standard ordering, Nyquist negative).
    pub fn wavenumber(&self, m: usize) -> f64 {
        let dk = 2.0 * PI / self.length;
        if m < self.n / 2 {
            m as f64 * dk
        } else {
            (m as f64 - self.n as f64) * dk
        }
    }

    pub fn wavenumbers(&self) -> Vec<f64> {
        (0..self.n).map(|m| self.wavenumber(m)).collect()
    }

    pub fn k_max(&self) -> f64 {
        PI / self.dx()
    }

    /// Index of the node at `-x_j`; the grid is symmetric about 0 modulo the period.
    pub fn mirror(&self, j: usize) -> usize {
        (self.n - j) % self.n
    }

    /// Index of the node at x = 0.
    pub fn origin(&self) -> usize {
        self.n / 2
    }

    pub fn same_as(&self, other: &Grid1D) -> bool {
        self.n == other.n && self.length == other.length
    }

    fn check_same(&self, other: &Grid1D) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "grid (n={}, L={}) vs (n={}, L={})",
                self.n, self.length, other.n, other.length
            )))
        }
    }
}

/// Forward/inverse FFT pair for one grid size. Inverse is normalized.
#[derive(Clone)]
pub struct Spectral {
    grid: Grid1D,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k: Vec<f64>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: Grid1D) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            grid,
            forward: planner.plan_fft_forward(grid.n()),
            inverse: planner.plan_fft_inverse(grid.n()),
            k: grid.wavenumbers(),
        }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.forward.process(data);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.inverse.process(data);
        let scale = 1.0 / self.grid.n() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// In-place spectral derivative of order 1 or 2.
    ///
    /// The Nyquist mode is dropped for odd orders so real data stays real.
    pub fn differentiate(&self, data: &mut [Complex64], order: u32) {
        self.forward(data);
        let nyquist = self.grid.n() / 2;
        for (m, v) in data.iter_mut().enumerate() {
            let k = self.k[m];
            *v *= match order {
                1 if m == nyquist => Complex64::new(0.0, 0.0),
                1 => Complex64::new(0.0, k),
                2 => Complex64::new(-k * k, 0.0),
                _ => unreachable!("derivative order validated by caller"),
            };
        }
        self.inverse(data);
    }

    pub fn derivative_real(&self, values: &[f64], order: u32) -> Vec<f64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.differentiate(&mut buf, order);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Band-limited translation `f(x) -> f(x - shift)`.
    pub fn translate(&self, data: &mut [Complex64], shift: f64) {
        self.forward(data);
        for (m, v) in data.iter_mut().enumerate() {
            let k = if m == self.grid.n() / 2 { 0.0 } else { self.k[m] };
            *v *= Complex64::from_polar(1.0, -k * shift);
        }
        self.inverse(data);
    }
}

/// Complex field sampled on a grid at simulation time `time`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveField {
    pub grid: Grid1D,
    pub values: Vec<Complex64>,
    pub time: f64,
}

impl WaveField {
    pub fn new(grid: Grid1D, values: Vec<Complex64>, time: f64) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::Dimension(format!(
                "field has {} samples, grid has {}",
                values.len(),
                grid.n()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("wave field samples".into()));
        }
        Ok(Self { grid, values, time })
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.n()],
            time: 0.0,
        }
    }

    pub fn from_real(grid: Grid1D, values: &[f64], time: f64) -> Result<Self> {
        Self::new(grid, values.iter().map(|&v| Complex64::new(v, 0.0)).collect(), time)
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> Complex64) -> Self {
        Self {
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
            time: 0.0,
        }
    }

    pub fn mass(&self) -> f64 {
        self.grid.dx() * self.values.iter().map(|v| v.norm_sqr()).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.mass().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
            time: self.time,
        }
    }
}

/// Spectral derivative of order 1 or 2.
pub fn spectral_derivative(field: &WaveField, order: u32) -> Result<WaveField> {
    if order != 1 && order != 2 {
        return Err(Error::InvalidConfig(format!("derivative order {order} not in {{1, 2}}")));
    }
    if field.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("spectral_derivative input".into()));
    }
    let spectral = Spectral::new(field.grid);
    let mut values = field.values.clone();
    spectral.differentiate(&mut values, order);
    Ok(WaveField {
        grid: field.grid,
        values,
        time: field.time,
    })
}

/// `<u, v> = ∫ conj(u) v dx`.
pub fn inner(u: &WaveField, v: &WaveField) -> Result<Complex64> {
    u.grid.check_same(&v.grid)?;
    Ok(inner_slices(&u.values, &v.values, u.grid.dx()))
}

pub fn inner_slices(u: &[Complex64], v: &[Complex64], dx: f64) -> Complex64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum::<Complex64>() * dx
}

pub fn dot_real(u: &[f64], v: &[f64], dx: f64) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() * dx
}

pub fn norm_real(u: &[f64], dx: f64) -> f64 {
    dot_real(u, u, dx).sqrt()
}

/// Default polynomial weight exponent for `‖(1+x²)^{-ν/2} ψ‖`.
pub const DEFAULT_NU: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub mass: f64,
    pub energy: f64,
    pub center: f64,
    pub momentum: f64,
    pub weighted_norm: f64,
    pub nu: f64,
}

/// `‖(1+x²)^{-ν/2} ψ‖₂` with the weight centered at x = 0.
pub fn weighted_norm(grid: &Grid1D, values: &[Complex64], nu: f64) -> f64 {
    let dx = grid.dx();
    let sum: f64 = values
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let x = grid.x(j);
            v.norm_sqr() * (1.0 + x * x).powf(-nu)
        })
        .sum();
    (sum * dx).sqrt()
}

/// Hamiltonian `∫ ½(|ψ_x|² + V_h|ψ|²) − F(|ψ|²)`.
pub fn energy(field: &WaveField, model: &ModelSpec, spectral: &Spectral) -> f64 {
    let mut dpsi = field.values.clone();
    spectral.differentiate(&mut dpsi, 1);
    let grid = field.grid;
    let sum: f64 = field
        .values
        .iter()
        .zip(&dpsi)
        .enumerate()
        .map(|(j, (psi, dpsi))| {
            let s = psi.norm_sqr();
            0.5 * (dpsi.norm_sqr() + model.scaled_potential(grid.x(j)) * s)
                - model.nonlinearity.primitive(s)
        })
        .sum();
    sum * grid.dx()
}

pub fn observables(field: &WaveField, model: &ModelSpec, nu: f64) -> Observables {
    let spectral = Spectral::new(field.grid);
    observables_with(field, model, nu, &spectral)
}

pub fn observables_with(
    field: &WaveField,
    model: &ModelSpec,
    nu: f64,
    spectral: &Spectral,
) -> Observables {
    let grid = field.grid;
    let dx = grid.dx();
    let mass = field.mass();
    let mut dpsi = field.values.clone();
    spectral.differentiate(&mut dpsi, 1);
    let (first_moment, current) = field.values.iter().zip(&dpsi).enumerate().fold(
        (0.0, 0.0),
        |(m, c), (j, (psi, d))| (m + grid.x(j) * psi.norm_sqr(), c + (psi.conj() * d).im),
    );
    let (center, momentum) = if mass > 0.0 {
        (first_moment * dx / mass, current * dx / mass)
    } else {
        (0.0, 0.0)
    };
    Observables {
        mass,
        energy: energy(field, model, spectral),
        center,
        momentum,
        weighted_norm: weighted_norm(&grid, &field.values, nu),
        nu,
    }
}

/// First column of the circulant second-derivative matrix, i.e. the inverse
/// transform of `-k²`.
pub fn second_derivative_stencil(grid: &Grid1D) -> Vec<f64> {
    let spectral = Spectral::new(*grid);
    let mut symbol: Vec<Complex64> = grid
        .wavenumbers()
        .iter()
        .map(|k| Complex64::new(-k * k, 0.0))
        .collect();
    spectral.inverse(&mut symbol);
    symbol.into_iter().map(|c| c.re).collect()
}

/// Dense spectral second-derivative matrix; applying it agrees with the FFT route.
pub fn second_derivative_matrix(grid: &Grid1D) -> faer::Mat<f64> {
    let c = second_derivative_stencil(grid);
    let n = grid.n();
    faer::Mat::from_fn(n, n, |i, j| c[(i + n - j) % n])
}
