//! Executes one scenario: validation, the task pipeline, artifacts and manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use soliton_core::evolve::{run, AbsorberLayer, EvolveConfig, RunOutput};
use soliton_core::groundstate::{branch_scan, fit_decay_rate, solve_ground_state, soliton_residual, SolitonProfile};
use soliton_core::io::{load_checkpoint, write_checkpoint, write_csv, write_profile_csv};
use soliton_core::linearization::{
    assemble, block_vector, compute_threshold_order, condition_diagnostics, fgr_quadratic_form, near_zero_spectrum,
    spectral_projection_pc, BlockOperator, InternalMode, LinearizationReport,
};
use soliton_core::model::{check_lambda, validate_model, ValidationOptions};
use soliton_core::tracker::{
    effective_dynamics, predicted_center_frequency, CacheConfig, ModeCache, TrackOptions, TrackSeries, Tracker,
};
use soliton_core::{Grid1D, ModelSpec, Spectral, WaveField};

use crate::error::{LabError, LabResult};
use crate::manifest::RunManifest;
use crate::scenario::{
    BranchParams, EvolveParams, FgrParams, ForcingKind, NoParams, Scenario, SpectrumParams, Task,
};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: Value,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

struct Context<'a> {
    scenario: &'a Scenario,
    dir: &'a Path,
    manifest: RunManifest,
}

impl Context<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> LabResult<T>) -> LabResult<T> {
        log::info!("[{name}] start");
        match f(self) {
            Ok(v) => {
                self.manifest.stage_ok(name);
                Ok(v)
            }
            Err(e) => {
                log::error!("{e}");
                self.manifest.stage_failed(name, e.to_string());
                Err(e)
            }
        }
    }

    fn write<F>(&mut self, name: &str, body: F) -> LabResult<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> soliton_core::Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(LabError::io(&path))?;
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(LabError::core("output"))?;
        w.flush().map_err(LabError::io(&path))?;
        self.manifest.add_output(self.dir, name)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> LabResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
        text.push('\n');
        self.write(name, |w| Ok(w.write_all(text.as_bytes())?))
    }
}

/// Runs `scenario` into `dir` and writes its manifest, also on failure.
pub fn run_scenario(scenario: &Scenario, dir: &Path) -> LabResult<RunReport> {
    std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let text = scenario.to_json();
    let mut cx = Context {
        scenario,
        dir,
        manifest: RunManifest::new(&text),
    };
    let result = execute(&mut cx, &text);
    let manifest_path = cx.manifest.write(dir)?;
    let summary = result?;
    Ok(RunReport {
        output_dir: dir.to_path_buf(),
        summary,
        manifest: cx.manifest,
        manifest_path,
    })
}

/// Loads a scenario file and runs it into its resolved output directory.
pub fn run_scenario_file(path: &Path) -> LabResult<RunReport> {
    let scenario = Scenario::load(path)?;
    run_scenario(&scenario, &scenario.resolved_output_dir())
}

struct Validated {
    model: ModelSpec,
    grid: Grid1D,
    header: Value,
}

fn execute(cx: &mut Context, text: &str) -> LabResult<Value> {
    cx.write(SCENARIO_FILE, |w| Ok(w.write_all(text.as_bytes())?))?;
    let v = cx.stage("validate", |cx| validate(cx.scenario))?;
    let body = match cx.scenario.task {
        Task::Groundstate => groundstate_task(cx, &v)?,
        Task::Branch => branch_task(cx, &v)?,
        Task::Spectrum => spectrum_task(cx, &v)?,
        Task::Evolve => evolve_task(cx, &v, false)?,
        Task::Track => evolve_task(cx, &v, true)?,
        Task::Newton => newton_task(cx, &v)?,
        Task::Fgr => fgr_task(cx, &v)?,
    };
    let mut summary = v.header;
    summary["result"] = body;
    cx.write_json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

fn validate(scenario: &Scenario) -> LabResult<Validated> {
    let model = scenario.model.clone();
    model.check().map_err(LabError::core("validate"))?;
    let interval = check_lambda(&model).map_err(LabError::core("validate"))?;
    let conditions = validate_model(&model, &ValidationOptions::default()).map_err(LabError::core("validate"))?;
    let grid = scenario.grid.build()?;
    if !(scenario.nu.is_finite() && scenario.nu >= 0.0) {
        return Err(LabError::Scenario(format!("nu = {} must be finite and non-negative", scenario.nu)));
    }
    let header = json!({
        "task": scenario.task.name(),
        "lambda": model.lambda,
        "h": model.h,
        "admissible_lambda": interval,
        "conditions": conditions.checks,
    });
    Ok(Validated { model, grid, header })
}

fn ground_state(cx: &mut Context, v: &Validated) -> LabResult<SolitonProfile> {
    cx.stage("groundstate", |_| {
        solve_ground_state(&v.model, &v.grid).map_err(LabError::core("groundstate"))
    })
}

struct Spectrum {
    op: BlockOperator,
    report: LinearizationReport,
}

fn spectrum(cx: &mut Context, v: &Validated, profile: &SolitonProfile, count: usize) -> LabResult<Spectrum> {
    cx.stage("linearization", |_| {
        let op = assemble(&v.model, profile, &v.grid).map_err(LabError::core("linearization"))?;
        let report = near_zero_spectrum(&op, count).map_err(LabError::core("linearization"))?;
        Ok(Spectrum { op, report })
    })
}

fn principal(s: &Spectrum) -> LabResult<&InternalMode> {
    s.report.principal().ok_or_else(|| LabError::Core {
        stage: "linearization",
        source: soliton_core::Error::InvalidConfig("the linearization has no internal mode".into()),
    })
}

fn groundstate_task(cx: &mut Context, v: &Validated) -> LabResult<Value> {
    cx.scenario.params::<NoParams>()?;
    let p = ground_state(cx, v)?;
    cx.write("profile.csv", |w| write_profile_csv(w, &p))?;
    cx.write("profile.bin", |w| write_checkpoint(w, &p.to_field()))?;
    let decay = fit_decay_rate(&p);
    Ok(json!({
        "shifted_lambda": v.model.shifted_lambda(),
        "delta": p.delta(),
        "peak": p.peak(),
        "residual": p.residual,
        "substitution_residual": soliton_residual(&v.model, &v.grid, &p.profile),
        "iterations": p.iterations,
        "decay": decay,
    }))
}

fn branch_task(cx: &mut Context, v: &Validated) -> LabResult<Value> {
    let params: BranchParams = cx.scenario.params()?;
    if params.lambdas.is_empty() {
        return Err(LabError::Scenario("branch needs at least one lambda".into()));
    }
    let branch = cx.stage("branch", |_| {
        let b = branch_scan(&v.model, &v.grid, &params.lambdas);
        if b.failures() == b.samples.len() {
            let first = b.samples[0].error.clone().unwrap_or_default();
            return Err(LabError::Core {
                stage: "branch",
                source: soliton_core::Error::NoConvergence {
                    stage: format!("every branch sample ({first})"),
                    iterations: 0,
                    residual: f64::NAN,
                },
            });
        }
        Ok(b)
    })?;
    let nan = f64::NAN;
    let rows: Vec<Vec<f64>> = branch
        .samples
        .iter()
        .map(|s| {
            vec![
                s.lambda,
                s.delta.unwrap_or(nan),
                s.delta_prime.unwrap_or(nan),
                s.residual.unwrap_or(nan),
                s.decay.map_or(nan, |d| d.rate),
            ]
        })
        .collect();
    cx.write("branch.csv", |w| {
        write_csv(w, &["lambda", "delta", "delta_prime", "residual", "decay_rate"], rows)
    })?;
    Ok(json!({ "failures": branch.failures(), "samples": branch.samples }))
}

fn spectrum_task(cx: &mut Context, v: &Validated) -> LabResult<Value> {
    let params: SpectrumParams = cx.scenario.params()?;
    let p = ground_state(cx, v)?;
    let s = spectrum(cx, v, &p, params.count)?;
    if let Some(mode) = s.report.principal() {
        let rows = (0..v.grid.n()).map(|j| vec![v.grid.x(j), p.profile[j], mode.xi[j], mode.eta[j]]);
        cx.write("mode.csv", |w| write_csv(w, &["x", "phi", "xi", "eta"], rows))?;
    }
    Ok(json!({
        "epsilon": s.report.epsilon,
        "epsilon_over_h": if v.model.h > 0.0 { Some(s.report.epsilon / v.model.h) } else { None },
        "omega_pred": predicted_center_frequency(&v.model),
        "kernel_residual": s.op.kernel_residual(),
        "associated_residual": s.op.associated_residual(),
        "diagnostics": condition_diagnostics(&s.report),
        "report": s.report,
    }))
}

/// Deterministic localized perturbation with `‖r‖₂ = size`.
fn seeded_remainder(grid: &Grid1D, seed: u64, size: f64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, Complex64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-5.0..5.0),
                rng.random_range(1.0..3.0),
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            )
        })
        .collect();
    let mut r: Vec<Complex64> = grid
        .nodes()
        .iter()
        .map(|&x| bumps.iter().map(|&(c, w, a)| a * (-((x - c) / w).powi(2)).exp()).sum())
        .collect();
    let norm = (r.iter().map(|c| c.norm_sqr()).sum::<f64>() * grid.dx()).sqrt();
    if norm > 0.0 {
        for c in &mut r {
            *c *= size / norm;
        }
    }
    r
}

fn initial_field(
    scenario: &Scenario,
    params: &EvolveParams,
    grid: &Grid1D,
    profile: &SolitonProfile,
    mode: Option<&InternalMode>,
) -> LabResult<WaveField> {
    if let Some(path) = &params.initial_checkpoint {
        let field = load_checkpoint(path).map_err(|e| match e {
            soliton_core::Error::Io(source) => LabError::Io {
                path: path.clone(),
                source,
            },
            other => LabError::core("initial")(other),
        })?;
        if !field.grid.same_as(grid) {
            return Err(LabError::Scenario(format!(
                "checkpoint grid (n = {}, L = {}) differs from the scenario grid",
                field.grid.n(),
                field.grid.length()
            )));
        }
        return Ok(field);
    }
    let mut values: Vec<Complex64> = profile.profile.iter().map(|&p| Complex64::new(p, 0.0)).collect();
    if params.z0 != 0.0 {
        let mode = mode.ok_or_else(|| LabError::Scenario("z0 != 0 needs an internal mode".into()))?;
        for (v, x) in values.iter_mut().zip(&mode.xi) {
            *v += params.z0 * x;
        }
    }
    if params.remainder_scale != 0.0 {
        let r = seeded_remainder(grid, scenario.seed, params.remainder_scale * params.z0 * params.z0);
        for (v, x) in values.iter_mut().zip(r) {
            *v += x;
        }
    }
    if params.a0 != 0.0 {
        Spectral::new(*grid).translate(&mut values, params.a0);
    }
    if params.p0 != 0.0 {
        for (v, x) in values.iter_mut().zip(grid.nodes()) {
            *v *= Complex64::from_polar(1.0, params.p0 * x);
        }
    }
    WaveField::new(*grid, values, 0.0).map_err(LabError::core("initial"))
}

fn evolve_config(scenario: &Scenario, params: &EvolveParams, grid: &Grid1D, epsilon: Option<f64>) -> LabResult<EvolveConfig> {
    let t_end = match (params.t_end, params.mode_periods) {
        (_, Some(m)) => {
            let eps = epsilon.filter(|e| *e > 0.0).ok_or_else(|| {
                LabError::Scenario("mode_periods needs an internal mode frequency".into())
            })?;
            m / eps
        }
        (Some(t), None) => t,
        (None, None) => return Err(LabError::Scenario("evolve needs t_end or mode_periods".into())),
    };
    let mut config = EvolveConfig::new(params.dt, t_end).with_stride(params.output_stride);
    if params.absorber {
        config = config.with_absorber(AbsorberLayer::standard(grid));
    }
    config.checkpoints = params.checkpoints.clone();
    config.nu = scenario.nu;
    config.check(grid).map_err(LabError::core("evolve"))?;
    Ok(config)
}

fn write_run(cx: &mut Context, out: &RunOutput) -> LabResult<()> {
    cx.write("conservation.csv", |w| out.log.write_csv(w))?;
    cx.write("final.bin", |w| write_checkpoint(w, &out.field))?;
    for (k, c) in out.checkpoints.iter().enumerate() {
        cx.write(&format!("checkpoint_{k:03}.bin"), |w| write_checkpoint(w, c))?;
    }
    Ok(())
}

fn run_summary(out: &RunOutput) -> Value {
    let last = out.log.last();
    json!({
        "t_final": out.field.time,
        "mass_drift": out.log.mass_drift(),
        "energy_drift": out.log.energy_drift(),
        "absorbed": last.map_or(0.0, |s| s.absorbed),
        "bookkeeping_defect": out.log.bookkeeping_defect(),
        "max_mass_increase": out.log.max_mass_increase,
        "warnings": out.log.warnings,
        "checkpoints": out.checkpoints.len(),
    })
}

/// Mean of `values` over samples with `t ∈ [start, start + width]`.
fn window_mean(times: &[f64], values: &[f64], start: f64, width: f64) -> Option<f64> {
    let picked: Vec<f64> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= start && **t <= start + width)
        .map(|(_, v)| *v)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

fn build_cache(cx: &mut Context, v: &Validated, p: &SolitonProfile, mode: &InternalMode) -> LabResult<ModeCache> {
    let nu = cx.scenario.nu;
    cx.stage("cache", |_| {
        let config = CacheConfig { nu, ..CacheConfig::default() };
        ModeCache::from_mode(&v.model, &v.grid, p, mode, config).map_err(LabError::core("cache"))
    })
}

fn evolve_task(cx: &mut Context, v: &Validated, tracked: bool) -> LabResult<Value> {
    let params: EvolveParams = cx.scenario.params()?;
    let p = ground_state(cx, v)?;
    let needs_mode = tracked || params.z0 != 0.0 || params.mode_periods.is_some();
    let spec = if needs_mode { Some(spectrum(cx, v, &p, 4)?) } else { None };
    let mode = match &spec {
        Some(s) => Some(principal(s)?.clone()),
        None => None,
    };
    let epsilon = mode.as_ref().map(|m| m.epsilon);
    let field = cx.stage("initial", |cx| initial_field(cx.scenario, &params, &v.grid, &p, mode.as_ref()))?;
    let config = evolve_config(cx.scenario, &params, &v.grid, epsilon)?;

    if !tracked {
        let out = cx.stage("evolve", |_| run(&field, &v.model, &config, &mut []).map_err(LabError::core("evolve")))?;
        write_run(cx, &out)?;
        return Ok(run_summary(&out));
    }

    let mode = mode.expect("tracked runs compute the mode");
    let report = &spec.as_ref().expect("tracked runs compute the spectrum").report;
    let order = match report.threshold_order {
        Some(n) => n,
        None => compute_threshold_order(mode.epsilon, v.model.lambda).map_err(LabError::core("track"))?.n,
    };
    let cache = build_cache(cx, v, &p, &mode)?;
    let mut tracker = Tracker::new(&cache);
    let out = cx.stage("evolve", |_| {
        run(&field, &v.model, &config, &mut [&mut tracker]).map_err(LabError::core("evolve"))
    })?;
    let series = cx.stage("track", |_| Ok(tracker.finish(&TrackOptions::new(mode.epsilon, order))))?;
    write_run(cx, &out)?;
    cx.write("track.csv", |w| series.write_csv(w))?;
    let mut summary = run_summary(&out);
    summary["epsilon"] = json!(mode.epsilon);
    summary["N"] = json!(order);
    summary["tracking"] = track_summary(&series, mode.epsilon, out.field.time);
    Ok(summary)
}

fn track_summary(series: &TrackSeries, epsilon: f64, t_final: f64) -> Value {
    let t: Vec<f64> = series.samples.iter().map(|s| s.t).collect();
    let wr: Vec<f64> = series.samples.iter().map(|s| s.wnorm_r).collect();
    let period = 2.0 * std::f64::consts::PI / epsilon;
    let transient = series.options.transient;
    json!({
        "summary": series.summary(None),
        "success_ratio": series.success_ratio,
        "attempted": series.attempted,
        "failures": series.failures.len(),
        "flags": series.flags,
        "envelope_z": series.envelope_z,
        "envelope_r": series.envelope_r,
        "normal_form": series.normal_form,
        "normal_form_mismatch": series.normal_form_mismatch,
        "lambda_cauchy": series.lambda_cauchy,
        "wnorm_r_after_transient": window_mean(&t, &wr, transient, period),
        "wnorm_r_final": window_mean(&t, &wr, t_final - period, period),
        "max_mass_defect": series.samples.iter().map(|s| s.mass_defect).fold(0.0, f64::max),
    })
}

fn newton_task(cx: &mut Context, v: &Validated) -> LabResult<Value> {
    let params: EvolveParams = cx.scenario.params()?;
    if params.a0 == 0.0 {
        log::warn!("[newton] a0 = 0: the center stays at the origin");
    }
    let p = ground_state(cx, v)?;
    let s = spectrum(cx, v, &p, 4)?;
    let mode = principal(&s)?.clone();
    let field = cx.stage("initial", |cx| initial_field(cx.scenario, &params, &v.grid, &p, Some(&mode)))?;
    let config = evolve_config(cx.scenario, &params, &v.grid, Some(mode.epsilon))?;
    let cache = build_cache(cx, v, &p, &mode)?;
    let mut tracker = Tracker::new(&cache);
    let out = cx.stage("evolve", |_| {
        run(&field, &v.model, &config, &mut [&mut tracker]).map_err(LabError::core("evolve"))
    })?;
    let samples = tracker.samples().to_vec();
    let attempted = out.log.samples.len();
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let a: Vec<f64> = samples.iter().map(|s| s.a).collect();
    let lam: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    let dynamics = cx.stage("dynamics", |_| {
        effective_dynamics(&t, &a, &lam, &v.model).map_err(LabError::core("dynamics"))
    })?;
    write_run(cx, &out)?;
    let rows = samples.iter().map(|s| vec![s.t, s.a, s.p, s.lambda]);
    cx.write("center.csv", |w| write_csv(w, &["t", "a", "p", "lambda"], rows))?;
    let mut summary = run_summary(&out);
    summary["decomposed"] = json!(samples.len());
    summary["attempted"] = json!(attempted);
    summary["dynamics"] = json!(dynamics);
    Ok(summary)
}

fn read_forcing(path: &Path, grid: &Grid1D) -> LabResult<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
    let bad = |msg: String| LabError::Scenario(format!("forcing file {}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    if header.split(',').map(str::trim).collect::<Vec<_>>() != ["x", "u", "v"] {
        return Err(bad(format!("header {header:?}, expected x,u,v")));
    }
    let (mut u, mut v) = (Vec::new(), Vec::new());
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
        if cols.len() != 3 {
            return Err(bad(format!("row {} has {} columns", k + 1, cols.len())));
        }
        if (cols[0] - grid.x(u.len().min(grid.n() - 1))).abs() > 1e-9 * grid.length() {
            return Err(bad(format!("row {}: x = {} is not the grid node", k + 1, cols[0])));
        }
        u.push(cols[1]);
        v.push(cols[2]);
    }
    if u.len() != grid.n() {
        return Err(bad(format!("{} rows for {} grid nodes", u.len(), grid.n())));
    }
    Ok((u, v))
}

fn fgr_task(cx: &mut Context, v: &Validated) -> LabResult<Value> {
    let params: FgrParams = cx.scenario.params()?;
    let p = ground_state(cx, v)?;
    let s = spectrum(cx, v, &p, 4)?;
    let mode = principal(&s)?.clone();
    let n = v.grid.n();
    let zeros = vec![0.0; n];
    let (u, w) = match params.forcing {
        ForcingKind::QuadraticMode => ((0..n).map(|j| p.profile[j] * mode.xi[j] * mode.xi[j]).collect(), zeros),
        ForcingKind::CrossMode => (zeros, (0..n).map(|j| p.profile[j] * mode.xi[j] * mode.eta[j]).collect()),
        ForcingKind::File => {
            let path = params
                .path
                .as_ref()
                .ok_or_else(|| LabError::Scenario("forcing kind file needs a path".into()))?;
            read_forcing(path, &v.grid)?
        }
    };
    let order = match params.order {
        Some(n) => n,
        None => compute_threshold_order(mode.epsilon, v.model.lambda).map_err(LabError::core("fgr"))?.n,
    };
    let value = cx.stage("fgr", |_| {
        let mut f = block_vector(&u, &w);
        if params.project {
            let pc = spectral_projection_pc(&s.op, &s.report).map_err(LabError::core("fgr"))?;
            f = pc.apply(&f);
        }
        fgr_quadratic_form(&s.op, &s.report, &f, order).map_err(LabError::core("fgr"))
    })?;
    let rows = value.sweep.points.iter().map(|q| vec![q.delta, q.re, q.im]);
    cx.write("absorption.csv", |w| write_csv(w, &["delta", "re", "im"], rows))?;
    Ok(json!({
        "epsilon": mode.epsilon,
        "N": order,
        "re_y": value.re_y,
        "form_re": value.form_re,
        "sign_ok": value.sign_ok,
        "conclusive": value.conclusive,
        "shift": value.shift,
        "floor": value.sweep.floor,
    }))
}
