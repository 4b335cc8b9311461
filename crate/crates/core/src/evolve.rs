//! Strang split-step integrator with an optional absorbing layer.

use std::io::Write;

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{observables_with, Grid1D, Observables, Spectral, WaveField, DEFAULT_NU};
use crate::io::write_csv;
use crate::model::ModelSpec;

/// Above this sup norm a run is aborted as blown up.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;

/// Smooth boundary mask `exp(−dt·s·((|x|−x₀)/W)^q₊)` with `x₀ = L/2 − W`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorberLayer {
    pub width: f64,
    pub strength: f64,
    pub power: f64,
}

impl AbsorberLayer {
    /// `W = L/8`, `s = 5`, `q = 3`.
    pub fn standard(grid: &Grid1D) -> Self {
        Self {
            width: grid.length() / 8.0,
            strength: 5.0,
            power: 3.0,
        }
    }

    pub fn mask(&self, grid: &Grid1D, dt: f64) -> Vec<f64> {
        let x0 = 0.5 * grid.length() - self.width;
        grid.nodes()
            .into_iter()
            .map(|x| {
                let d = ((x.abs() - x0) / self.width).max(0.0);
                (-dt * self.strength * d.powf(self.power)).exp()
            })
            .collect()
    }
}

/// Drift thresholds that trigger warnings in the conservation log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorTolerances {
    pub mass: f64,
    pub energy: f64,
    /// Largest admissible per-step mass increase with the absorber on.
    pub mass_increase: f64,
}

impl Default for MonitorTolerances {
    fn default() -> Self {
        Self {
            mass: 1e-10,
            energy: 1e-8,
            mass_increase: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Observers and the log are fed every `output_stride` steps.
    pub output_stride: usize,
    pub absorber: Option<AbsorberLayer>,
    #[serde(default)]
    pub monitor: MonitorTolerances,
    /// Times at which a copy of the field is kept, rounded to the nearest step.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_nu")]
    pub nu: f64,
}

fn default_nu() -> f64 {
    DEFAULT_NU
}

impl EvolveConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            output_stride: 1,
            absorber: None,
            monitor: MonitorTolerances::default(),
            checkpoints: Vec::new(),
            nu: DEFAULT_NU,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.output_stride = stride;
        self
    }

    pub fn with_absorber(mut self, absorber: AbsorberLayer) -> Self {
        self.absorber = Some(absorber);
        self
    }

    pub fn check(&self, grid: &Grid1D) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::InvalidConfig(format!("t_end = {} must be non-negative", self.t_end)));
        }
        if self.output_stride == 0 {
            return Err(Error::InvalidConfig("output_stride must be at least 1".into()));
        }
        if let Some(a) = &self.absorber {
            if !(a.width > 0.0 && a.width < 0.25 * grid.length()) {
                return Err(Error::InvalidConfig(format!(
                    "absorber width {} must lie in (0, L/4 = {})",
                    a.width,
                    0.25 * grid.length()
                )));
            }
            if !(a.strength.is_finite() && a.strength >= 0.0 && a.power.is_finite() && a.power > 0.0) {
                return Err(Error::InvalidConfig("absorber strength and power must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of steps; `t_end` is rounded to a whole number of steps.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Precomputed phases for one step size.
pub struct SplitStepper {
    grid: Grid1D,
    spectral: Spectral,
    dt: f64,
    potential: Vec<f64>,
    nonlinearity: crate::model::Nonlinearity,
    kinetic: Vec<Complex64>,
    mask: Option<Vec<f64>>,
}

impl SplitStepper {
    pub fn new(model: &ModelSpec, grid: Grid1D, dt: f64, absorber: Option<&AbsorberLayer>) -> Self {
        let spectral = Spectral::new(grid);
        let kinetic = spectral
            .wavenumbers()
            .iter()
            .map(|k| Complex64::from_polar(1.0, -dt * k * k))
            .collect();
        Self {
            grid,
            spectral,
            dt,
            potential: grid.nodes().into_iter().map(|x| model.scaled_potential(x)).collect(),
            nonlinearity: model.nonlinearity.clone(),
            kinetic,
            mask: absorber.map(|a| a.mask(&grid, dt)),
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    fn half_phase(&self, values: &mut [Complex64]) {
        let tau = 0.5 * self.dt;
        for (v, pot) in values.iter_mut().zip(&self.potential) {
            let s = v.norm_sqr();
            *v *= Complex64::from_polar(1.0, -tau * (pot - self.nonlinearity.f(s)));
        }
    }

    /// Advances in place by one step; returns the mass removed by the absorber.
    pub fn step(&self, field: &mut WaveField) -> Result<f64> {
        if !field.grid.same_as(&self.grid) {
            return Err(Error::InvalidGrid("field and stepper grids differ".into()));
        }
        let values = &mut field.values;
        self.half_phase(values);
        self.spectral.forward(values);
        for (v, k) in values.iter_mut().zip(&self.kinetic) {
            *v *= k;
        }
        self.spectral.inverse(values);
        self.half_phase(values);
        let mut absorbed = 0.0;
        if let Some(mask) = &self.mask {
            let dx = self.grid.dx();
            for (v, m) in values.iter_mut().zip(mask) {
                let before = v.norm_sqr();
                *v *= *m;
                absorbed += (before - v.norm_sqr()) * dx;
            }
        }
        field.time += self.dt;
        let mut sup: f64 = 0.0;
        for v in values.iter() {
            let a = v.norm();
            if !a.is_finite() {
                return Err(Error::BlowUp {
                    time: field.time,
                    reason: "non-finite sample".into(),
                });
            }
            sup = sup.max(a);
        }
        if sup > BLOW_UP_THRESHOLD {
            return Err(Error::BlowUp {
                time: field.time,
                reason: format!("sup |psi| = {sup:.3e}"),
            });
        }
        Ok(absorbed)
    }
}

/// One step of size `config.dt` from a fresh stepper.
pub fn step(field: &WaveField, model: &ModelSpec, config: &EvolveConfig) -> Result<WaveField> {
    config.check(&field.grid)?;
    let stepper = SplitStepper::new(model, field.grid, config.dt, config.absorber.as_ref());
    let mut next = field.clone();
    stepper.step(&mut next)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationSample {
    pub t: f64,
    pub mass: f64,
    pub energy: f64,
    pub absorbed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConservationLog {
    pub samples: Vec<ConservationSample>,
    /// Largest single-step mass increase seen with the absorber on.
    pub max_mass_increase: f64,
    pub warnings: Vec<String>,
}

impl ConservationLog {
    pub fn first(&self) -> Option<&ConservationSample> {
        self.samples.first()
    }

    pub fn last(&self) -> Option<&ConservationSample> {
        self.samples.last()
    }

    /// `max_t |N(t)/N(0) − 1|`.
    pub fn mass_drift(&self) -> f64 {
        let Some(first) = self.first() else { return 0.0 };
        self.samples
            .iter()
            .map(|s| (s.mass / first.mass - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max_t |H(t) − H(0)| / |H(0)|`.
    pub fn energy_drift(&self) -> f64 {
        let Some(first) = self.first() else { return 0.0 };
        self.samples
            .iter()
            .map(|s| (s.energy - first.energy).abs() / first.energy.abs())
            .fold(0.0, f64::max)
    }

    /// Total absorbed mass minus the observed mass loss; zero up to round-off.
    pub fn bookkeeping_defect(&self) -> f64 {
        match (self.first(), self.last()) {
            (Some(a), Some(b)) => (b.absorbed - (a.mass - b.mass)).abs(),
            _ => 0.0,
        }
    }

    /// Columns `t, N, H, absorbed`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(
            w,
            &["t", "N", "H", "absorbed"],
            self.samples.iter().map(|s| vec![s.t, s.mass, s.energy, s.absorbed]),
        )
    }
}

/// Read-only view handed to observers at each output step.
pub struct Snapshot<'a> {
    pub step: usize,
    pub field: &'a WaveField,
    pub observables: &'a Observables,
    pub absorbed: f64,
}

pub trait Observer {
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<()>;
}

impl<F> Observer for F
where
    F: FnMut(&Snapshot<'_>) -> Result<()>,
{
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<()> {
        self(snapshot)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub field: WaveField,
    pub log: ConservationLog,
    pub checkpoints: Vec<WaveField>,
}

/// Evolves `field` to `t_end`, feeding observers every `output_stride` steps
/// and at the final step. Observer errors are logged and do not stop the run.
pub fn run(
    field: &WaveField,
    model: &ModelSpec,
    config: &EvolveConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<RunOutput> {
    model.check()?;
    config.check(&field.grid)?;
    let grid = field.grid;
    let stepper = SplitStepper::new(model, grid, config.dt, config.absorber.as_ref());
    let steps = config.steps();
    let t0 = field.time;
    let mut checkpoint_steps: Vec<usize> = config
        .checkpoints
        .iter()
        .map(|t| ((t - t0) / config.dt).round().max(0.0) as usize)
        .filter(|&k| k <= steps)
        .collect();
    checkpoint_steps.sort_unstable();
    checkpoint_steps.dedup();
    let mut next_checkpoint = checkpoint_steps.iter().peekable();

    let mut state = field.clone();
    let mut log = ConservationLog::default();
    let mut checkpoints = Vec::new();
    let mut absorbed = 0.0;
    let mut mass = state.mass();

    let mut emit = |k: usize, state: &WaveField, absorbed: f64, log: &mut ConservationLog| {
        let obs = observables_with(state, model, config.nu, stepper.spectral());
        log.samples.push(ConservationSample {
            t: state.time,
            mass: obs.mass,
            energy: obs.energy,
            absorbed,
        });
        let snapshot = Snapshot {
            step: k,
            field: state,
            observables: &obs,
            absorbed,
        };
        for (i, o) in observers.iter_mut().enumerate() {
            if let Err(e) = o.observe(&snapshot) {
                warn!("observer {i} failed at t = {:.6}: {e}", state.time);
            }
        }
    };

    emit(0, &state, absorbed, &mut log);
    if next_checkpoint.peek() == Some(&&0) {
        checkpoints.push(state.clone());
        next_checkpoint.next();
    }
    for k in 1..=steps {
        absorbed += stepper.step(&mut state)?;
        state.time = t0 + k as f64 * config.dt;
        if config.absorber.is_some() {
            let new_mass = state.mass();
            log.max_mass_increase = log.max_mass_increase.max(new_mass - mass);
            mass = new_mass;
        }
        if k % config.output_stride == 0 || k == steps {
            emit(k, &state, absorbed, &mut log);
        }
        if next_checkpoint.peek() == Some(&&k) {
            checkpoints.push(state.clone());
            next_checkpoint.next();
        }
    }

    let tol = config.monitor;
    if config.absorber.is_none() {
        if log.mass_drift() > tol.mass {
            log.warnings.push(format!("mass drift {:.3e} exceeds {:.1e}", log.mass_drift(), tol.mass));
        }
        if log.energy_drift() > tol.energy {
            log.warnings.push(format!("energy drift {:.3e} exceeds {:.1e}", log.energy_drift(), tol.energy));
        }
    } else if log.max_mass_increase > tol.mass_increase {
        log.warnings.push(format!(
            "mass increased by {:.3e} in one step with the absorber on",
            log.max_mass_increase
        ));
    }
    for w in &log.warnings {
        warn!("{w}");
    }
    Ok(RunOutput {
        field: state,
        log,
        checkpoints,
    })
}
