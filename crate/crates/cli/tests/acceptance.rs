//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//!
//! Run with `cargo test -p soliton-lab --test acceptance --release`.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use soliton_core::evolve::run;
use soliton_core::groundstate::{branch_scan, solve_ground_state};
use soliton_core::linearization::compute_threshold_order;
use soliton_core::tracker::{
    decompose, fit_normal_form, integrate_normal_form, orthogonality_residuals, reconstruct, CacheConfig,
};
use soliton_core::{EvolveConfig, Grid1D, ModeCache, ModelSpec, Nonlinearity, Potential, WaveField};
use soliton_lab::scenario::Scenario;
use soliton_lab::{run_scenario, sweep};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"));
    Scenario::load(path).unwrap()
}

fn num(v: &Value, pointer: &str) -> f64 {
    v.pointer(pointer)
        .and_then(Value::as_f64)
        .unwrap_or_else(|| panic!("{pointer} missing in summary"))
}

fn canonical(h: f64) -> ModelSpec {
    ModelSpec::new(
        Nonlinearity::Cubic,
        Potential::GaussianWell {
            depth: 0.2,
            width: 1.0,
        },
        h,
        0.25,
    )
    .unwrap()
}

fn ground_state_exactness() -> Outcome {
    let model = ModelSpec::new(Nonlinearity::Cubic, Potential::Zero, 0.0, 1.0).unwrap();
    let grid = Grid1D::new(1024, 40.0).unwrap();
    let p = solve_ground_state(&model, &grid).unwrap();
    let sup = grid
        .nodes()
        .iter()
        .zip(&p.profile)
        .map(|(x, v)| (v - 2f64.sqrt() / x.cosh()).abs())
        .fold(0.0, f64::max);
    let branch = branch_scan(&model, &grid, &[0.999, 1.0, 1.001]);
    let at_one = &branch.samples[1];
    let delta = at_one.delta.unwrap();
    let delta_prime = at_one.delta_prime.unwrap();
    let rel = (delta / 4.0 - 1.0).abs();
    let dp = (delta_prime - 2.0).abs();
    Outcome::new(
        sup <= 1e-8 && rel <= 1e-6 && dp <= 1e-3,
        format!("sup err {sup:.2e} (<= 1e-8), delta rel {rel:.2e} (<= 1e-6), delta' err {dp:.2e} (<= 1e-3)"),
    )
}

/// Spectrum rows at h = 0.2, 0.1, 0.05, shared by the kernel, asymptotics and gap checks.
struct SpectrumSweep {
    rows: Vec<(f64, Value)>,
}

fn spectrum_sweep(out: &Path) -> SpectrumSweep {
    let s = scenario("spectrum_canonical");
    let table = sweep(&s, "h", &[0.2, 0.1, 0.05], 1, out).unwrap();
    assert!(table.warnings.is_empty(), "{:?}", table.warnings);
    SpectrumSweep {
        rows: table.rows.into_iter().map(|r| (r.value, r.summary)).collect(),
    }
}

impl SpectrumSweep {
    fn at(&self, h: f64) -> &Value {
        &self.rows.iter().find(|(v, _)| *v == h).unwrap().1
    }
}

fn kernel_identities(sw: &SpectrumSweep) -> Outcome {
    let r = sw.at(0.1);
    let k = num(r, "/result/kernel_residual");
    let a = num(r, "/result/associated_residual");
    Outcome::new(
        k <= 1e-9 && a <= 1e-6,
        format!("|L-phi|/|phi| {k:.2e} (<= 1e-9), |L+ dphi + phi|/|phi| {a:.2e} (<= 1e-6)"),
    )
}

fn eigenvalue_asymptotics(sw: &SpectrumSweep) -> Outcome {
    let target = 0.8f64.sqrt();
    let devs: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|&h| (num(sw.at(h), "/result/epsilon_over_h") / target - 1.0).abs())
        .collect();
    let decreasing = devs.windows(2).all(|w| w[1] < w[0]);
    let overlap = num(sw.at(0.05), "/result/report/overlaps/xi_vs_dphi0").abs();
    Outcome::new(
        decreasing && devs[2] <= 0.10 && overlap >= 0.95,
        format!(
            "eps/h deviation {:.3} > {:.3} > {:.3} (last <= 0.10), overlap {overlap:.4} (>= 0.95)",
            devs[0], devs[1], devs[2]
        ),
    )
}

fn gap_structure(sw: &SpectrumSweep) -> Outcome {
    let d = &sw.at(0.1)["result"]["diagnostics"];
    let count = d["discrete_count"].as_u64().unwrap();
    let isolated = d["isolated"].as_bool().unwrap();
    let freqs = &sw.at(0.1)["result"]["report"]["gap_frequencies"];
    Outcome::new(
        count == 4 && isolated,
        format!("discrete count {count} (== 4), isolated {isolated}, gap frequencies {freqs}"),
    )
}

struct Orbit {
    mass_drift: f64,
    energy_drift: f64,
    distance: f64,
}

fn soliton_orbit() -> Orbit {
    let model = canonical(0.1);
    let grid = Grid1D::new(1024, 160.0).unwrap();
    let psi0 = solve_ground_state(&model, &grid).unwrap().to_field();
    let t_end = 50.0;
    let out = run(&psi0, &model, &EvolveConfig::new(1e-3, t_end).with_stride(1000), &mut []).unwrap();
    Orbit {
        mass_drift: out.log.mass_drift(),
        energy_drift: out.log.energy_drift(),
        distance: orbit_error(&out.field, &psi0, model.lambda * t_end),
    }
}

fn orbit_error(field: &WaveField, psi0: &WaveField, angle: f64) -> f64 {
    let phase = Complex64::from_polar(1.0, angle);
    let diff: Vec<Complex64> = field.values.iter().zip(&psi0.values).map(|(a, b)| a - b * phase).collect();
    WaveField::new(psi0.grid, diff, 0.0).unwrap().norm()
}

fn strang_ratio() -> f64 {
    let model = canonical(0.1);
    let grid = Grid1D::new(256, 128.0).unwrap();
    let psi0 = solve_ground_state(&model, &grid).unwrap().to_field();
    let t_end = 5.0;
    let error = |dt: f64| {
        let out = run(&psi0, &model, &EvolveConfig::new(dt, t_end).with_stride(1000), &mut []).unwrap();
        orbit_error(&out.field, &psi0, model.lambda * t_end)
    };
    error(0.1) / error(0.05)
}

fn conservation(orbit: &Orbit) -> Outcome {
    let ratio = strang_ratio();
    Outcome::new(
        orbit.mass_drift <= 1e-10 && orbit.energy_drift <= 1e-8 && (3.6..=4.4).contains(&ratio),
        format!(
            "mass drift {:.2e} (<= 1e-10), energy drift {:.2e} (<= 1e-8), Strang ratio {ratio:.3} (in [3.6, 4.4])",
            orbit.mass_drift, orbit.energy_drift
        ),
    )
}

fn stationary_orbit(orbit: &Orbit) -> Outcome {
    Outcome::new(
        orbit.distance <= 1e-4,
        format!("|psi(50) - e^(50i lambda) phi| {:.2e} (<= 1e-4)", orbit.distance),
    )
}

fn relaxation(track: &Value) -> Outcome {
    let r = &track["result"];
    let eps = num(r, "/epsilon");
    let n = compute_threshold_order(eps, 0.25).unwrap().n;
    let rise = num(r, "/tracking/envelope_z/max_rise");
    let absorbed = num(r, "/absorbed");
    let w0 = num(r, "/tracking/wnorm_r_after_transient");
    let w1 = num(r, "/tracking/wnorm_r_final");
    Outcome::new(
        n == 1 && rise <= 0.0 && absorbed > 0.0 && w1 < w0,
        format!(
            "eps {eps:.4}, N {n} (== 1), envelope max rise {rise:.2e} (<= 0), absorbed {absorbed:.2e} (> 0), \
             weighted |R| {w0:.3e} -> {w1:.3e} (decreasing)"
        ),
    )
}

fn normal_form(track: &Value) -> Outcome {
    let r = &track["result"];
    let eps = num(r, "/epsilon");
    let fit_eps = num(r, "/tracking/normal_form/epsilon");
    let y_re = num(r, "/tracking/normal_form/y_re");
    let dev = (fit_eps / eps - 1.0).abs();

    let y = Complex64::new(-0.3, 0.1);
    let (t, z) = integrate_normal_form(0.1, &[y], Complex64::new(0.3, 0.0), 0.01, 20_000, 10);
    let fit = fit_normal_form(&t, &z, 1, Some(0.1)).unwrap();
    let loop_err = [
        (fit.epsilon / 0.1 - 1.0).abs(),
        (fit.y_re / y.re - 1.0).abs(),
        (fit.y_im / y.im - 1.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Outcome::new(
        dev <= 0.05 && y_re < 0.0 && loop_err <= 0.02,
        format!("eps fit deviation {dev:.3} (<= 0.05), Re Y {y_re:.3e} (< 0), closed loop error {loop_err:.2e} (<= 0.02)"),
    )
}

fn newton_dynamics(out: &Path) -> Outcome {
    let report = run_scenario(&scenario("newton_displaced"), out).unwrap();
    let d = &report.summary["result"]["dynamics"];
    let ratio = d["ratio"].as_f64();
    let drift = num(d, "/lambda_drift");
    let ok = ratio.is_some_and(|r| (r - 1.0).abs() <= 0.10) && drift <= 0.02;
    Outcome::new(
        ok,
        format!(
            "omega_fit/omega_pred {} (within 10%), lambda drift {drift:.2e} (<= 0.02)",
            ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
        ),
    )
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn tracker_correctness() -> Outcome {
    let grid = Grid1D::new(512, 128.0).unwrap();
    let cache = ModeCache::new(&canonical(0.2), &grid, CacheConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut round, mut param, mut ortho, mut gauge) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let lambda = rng.random_range(0.24..0.26);
        let theta = rng.random_range(-PI..PI);
        let (z1, z2) = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
        let bumps: Vec<(f64, f64, Complex64)> = (0..3)
            .map(|_| {
                let c = rng.random_range(-6.0..6.0);
                let w = rng.random_range(1.0..4.0);
                (c, w, Complex64::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)))
            })
            .collect();
        let f = cache.frame(lambda).unwrap();
        let rot = Complex64::from_polar(1.0, theta);
        let values = grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let r: Complex64 = bumps.iter().map(|&(c, w, a)| a * (-((x - c) / w).powi(2)).exp()).sum();
                rot * (Complex64::new(f.phi[j] + z1 * f.xi[j], z2 * f.eta[j]) + r)
            })
            .collect();
        let psi = WaveField::new(grid, values, 0.0).unwrap();

        let d = decompose(&psi, &cache, None).unwrap();
        let back = reconstruct(&d, &cache).unwrap();
        round = round.max(back.values.iter().zip(&psi.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
        let again = decompose(&back, &cache, None).unwrap();
        param = param
            .max((again.lambda - d.lambda).abs())
            .max((again.z1 - d.z1).abs())
            .max((again.z2 - d.z2).abs())
            .max(wrap(again.theta - d.theta).abs());
        let o = orthogonality_residuals(&psi, &d, &cache).unwrap();
        ortho = ortho.max(o.iter().fold(0.0, |m: f64, r| m.max(*r)) / psi.norm());
        let alpha = rng.random_range(-PI..PI);
        let g = decompose(&psi.scaled(Complex64::from_polar(1.0, alpha)), &cache, None).unwrap();
        gauge = gauge
            .max(wrap(g.theta - d.theta - alpha).abs())
            .max((g.lambda - d.lambda).abs())
            .max((g.z1 - d.z1).abs())
            .max((g.z2 - d.z2).abs())
            .max((g.remainder_norm - d.remainder_norm).abs());
    }
    Outcome::new(
        round <= 1e-12 && param <= 1e-10 && ortho <= 1e-9 && gauge <= 1e-10,
        format!(
            "reconstruction {round:.1e} (<= 1e-12), parameters {param:.1e} (<= 1e-10), \
             orthogonality {ortho:.1e} (<= 1e-9), gauge {gauge:.1e} (<= 1e-10)"
        ),
    )
}

fn determinism(first: &[(String, PathBuf)], base: &Path) -> Outcome {
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, dir) in first {
        let again = base.join(name);
        let report = run_scenario(&scenario(name), &again).unwrap();
        for o in &report.manifest.outputs {
            compared += 1;
            let a = std::fs::read(dir.join(&o.path)).unwrap_or_default();
            let b = std::fs::read(again.join(&o.path)).unwrap();
            if a != b {
                differing.push(format!("{name}/{}", o.path.display()));
            }
        }
    }
    Outcome::new(
        differing.is_empty() && compared > 0,
        format!("{compared} outputs compared, differing: {differing:?}"),
    )
}

struct Criterion<'a> {
    id: usize,
    name: &'a str,
    budget: Option<Duration>,
}

fn report(c: &Criterion<'_>, started: Instant, result: std::thread::Result<Outcome>) -> bool {
    let elapsed = started.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(budget) = c.budget {
        if elapsed > budget {
            pass = false;
        }
        detail.push_str(&format!(", runtime {:.1} s (< {} s)", elapsed.as_secs_f64(), budget.as_secs()));
    } else {
        detail.push_str(&format!(", runtime {:.1} s", elapsed.as_secs_f64()));
    }
    println!("{} [{:2}] {}: {detail}", if pass { "PASS" } else { "FAIL" }, c.id, c.name);
    pass
}

fn check(c: Criterion<'_>, results: &mut Vec<bool>, f: impl FnOnce() -> Outcome) {
    let started = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f));
    results.push(report(&c, started, r));
}

/// Runs a shared computation, reporting every dependent criterion as failed if it panics.
fn shared<T>(f: impl FnOnce() -> T) -> (Option<T>, Duration) {
    let started = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).ok();
    (r, started.elapsed())
}

fn dependent<T>(
    c: Criterion<'_>,
    results: &mut Vec<bool>,
    input: &Option<T>,
    setup: Duration,
    f: impl FnOnce(&T) -> Outcome,
) {
    let started = Instant::now() - setup;
    let r = match input {
        Some(v) => catch_unwind(AssertUnwindSafe(|| f(v))),
        None => Ok(Outcome::new(false, "shared computation panicked".into())),
    };
    results.push(report(&c, started, r));
}

fn crit(id: usize, name: &str, secs: Option<u64>) -> Criterion<'_> {
    Criterion {
        id,
        name,
        budget: secs.map(Duration::from_secs),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let base = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    check(crit(1, "ground-state exactness", Some(5)), &mut results, ground_state_exactness);

    let (sw, t_sweep) = shared(|| spectrum_sweep(&base.path().join("sweep")));
    dependent(crit(2, "kernel identities", None), &mut results, &sw, Duration::ZERO, kernel_identities);
    dependent(crit(3, "eigenvalue asymptotics", Some(120)), &mut results, &sw, t_sweep, eigenvalue_asymptotics);
    dependent(crit(4, "gap structure", None), &mut results, &sw, Duration::ZERO, gap_structure);

    let (orbit, t_orbit) = shared(soliton_orbit);
    dependent(crit(5, "conservation", Some(60)), &mut results, &orbit, t_orbit, conservation);
    dependent(crit(6, "stationary orbit", None), &mut results, &orbit, Duration::ZERO, stationary_orbit);

    let track_dir = base.path().join("first").join("track_relaxation");
    let (track, t_track) = shared(|| run_scenario(&scenario("track_relaxation"), &track_dir).unwrap().summary);
    dependent(crit(7, "relaxation", None), &mut results, &track, t_track, relaxation);
    dependent(crit(8, "normal-form consistency", None), &mut results, &track, Duration::ZERO, normal_form);

    check(crit(9, "effective Newton dynamics", None), &mut results, || {
        newton_dynamics(&base.path().join("newton"))
    });
    check(crit(10, "tracker correctness", Some(30)), &mut results, tracker_correctness);

    check(crit(11, "determinism", None), &mut results, || {
        let mut first = vec![("track_relaxation".to_string(), track_dir.clone())];
        for name in ["groundstate_free", "spectrum_canonical"] {
            let dir = base.path().join("first").join(name);
            run_scenario(&scenario(name), &dir).unwrap();
            first.push((name.to_string(), dir));
        }
        determinism(&first, &base.path().join("second"))
    });

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
