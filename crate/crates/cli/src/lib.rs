//! Scenario-driven front end for `soliton_core`: runs task pipelines from JSON
//! scenarios, writes CSV/JSON/binary artifacts with a checksummed manifest,
//! and sweeps scalar parameters.

pub mod error;
pub mod manifest;
pub mod runner;
pub mod scenario;
pub mod sweep;

pub use error::{LabError, LabResult};
pub use manifest::{verify, RunManifest};
pub use runner::{run_scenario, run_scenario_file, RunReport};
pub use scenario::{Scenario, Task};
pub use sweep::{sweep, SweepTable};
