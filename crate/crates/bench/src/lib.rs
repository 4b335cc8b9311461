//! Shared fixtures for the benchmarks.

use soliton_core::{Grid1D, ModelSpec, Nonlinearity, Potential};

/// Cubic NLS in the well `−0.2e^{−x²}` at `λ = 0.25`.
pub fn canonical_model(h: f64) -> ModelSpec {
    ModelSpec::new(
        Nonlinearity::Cubic,
        Potential::GaussianWell {
            depth: 0.2,
            width: 1.0,
        },
        h,
        0.25,
    )
    .expect("canonical model is valid")
}

pub fn grid(n: usize, length: f64) -> Grid1D {
    Grid1D::new(n, length).expect("grid is valid")
}
