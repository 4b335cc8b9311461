//! Numerical laboratory for trapped NLS solitons in one dimension.

pub mod error;
pub mod evolve;
pub mod grid;
pub mod groundstate;
pub mod io;
pub mod linearization;
pub mod model;
pub mod tracker;

pub use error::{Error, Result};
pub use evolve::{AbsorberLayer, ConservationLog, EvolveConfig, Observer, RunOutput, Snapshot, SplitStepper};
pub use grid::{Grid1D, Observables, Spectral, WaveField};
pub use model::{Interval, ModelSpec, Nonlinearity, Potential};
pub use tracker::{Decomposition, ModeCache, TrackSeries, Tracker};
