use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soliton_core::groundstate::{solve_free_soliton, solve_ground_state};
use soliton_core::linearization::*;
use soliton_core::{Grid1D, ModelSpec, Nonlinearity, Potential};

fn well(h: f64) -> ModelSpec {
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

fn operator(model: &ModelSpec, n: usize, length: f64) -> BlockOperator {
    let grid = Grid1D::new(n, length).unwrap();
    let profile = solve_ground_state(model, &grid).unwrap();
    assemble(model, &profile, &grid).unwrap()
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn random_block(rng: &mut ChaCha8Rng, grid: &Grid1D) -> Vec<Complex64> {
    let env: Vec<f64> = grid.nodes().iter().map(|x| (-x * x / 50.0).exp()).collect();
    (0..2 * grid.n())
        .map(|i| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * env[i % grid.n()])
        .collect()
}

#[test]
fn free_soliton_kernel_identities() {
    let model = ModelSpec::new(Nonlinearity::Cubic, Potential::Zero, 0.0, 1.0).unwrap();
    let grid = Grid1D::new(256, 40.0).unwrap();
    let profile = solve_free_soliton(&model.nonlinearity, 1.0, &grid).unwrap();
    let op = assemble(&model, &profile, &grid).unwrap();
    assert!(op.kernel_residual() <= 1e-9);
    assert!(op.associated_residual() <= 1e-6);
    let dphi = op.dx_phi();
    let l = op.apply_l_plus(&dphi);
    let rel = grid_norm(&op, &l) / grid_norm(&op, &dphi);
    assert!(rel <= 1e-8, "translation kernel residual {rel:e}");
}

#[test]
fn free_model_has_only_zero_modes() {
    let model = ModelSpec::new(Nonlinearity::Cubic, Potential::Zero, 0.0, 0.25).unwrap();
    let op = operator(&model, 256, 96.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    assert_eq!(report.epsilon, 0.0);
    assert!(report.modes.is_empty());
    assert!(!report.sa_flag);
    assert_eq!(report.eigenvalues[0].mult, 4);
    assert!(!condition_diagnostics(&report).sa_pass);
}

#[test]
fn small_h_frequency_follows_the_harmonic_law() {
    let op = operator(&well(0.05), 1024, 160.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let ratio = report.epsilon / (0.05 * (2.0f64 * 0.4).sqrt());
    assert!((0.85..=1.15).contains(&ratio), "ratio {ratio}");
    assert!(report.epsilon > 0.0 && report.epsilon < report.lambda);
    // the ±iε pair and every further gap mode come in conjugate pairs
    for mode in &report.modes {
        let plus = report.eigenvalues.iter().any(|e| e.re == 0.0 && e.im == mode.epsilon);
        let minus = report.eigenvalues.iter().any(|e| e.re == 0.0 && e.im == -mode.epsilon);
        assert!(plus && minus);
    }
}

#[test]
fn frequency_is_grid_converged() {
    let coarse = near_zero_spectrum(&operator(&well(0.2), 256, 128.0), 4).unwrap();
    let fine = near_zero_spectrum(&operator(&well(0.2), 512, 128.0), 4).unwrap();
    let rel = (coarse.epsilon - fine.epsilon).abs() / fine.epsilon;
    assert!(rel <= 1e-6, "{rel:e}");
}

#[test]
fn product_eigenvalue_matches_block_eigenvalue() {
    // oracle: smallest positive eigenvalue of the dense product L₋L₊
    let op = operator(&well(0.2), 128, 96.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let m = &op.l_minus * &op.l_plus;
    let ev = m.eigenvalues().unwrap();
    let lam2 = op.lambda * op.lambda;
    let smallest = ev
        .iter()
        .map(|z| z.re)
        .filter(|&r| r > 1e-6 * lam2)
        .fold(f64::INFINITY, f64::min);
    let rel = (smallest.sqrt() - report.epsilon).abs() / report.epsilon;
    assert!(rel <= 1e-7, "{rel:e}");
}

#[test]
fn projector_is_idempotent_and_spares_high_frequencies() {
    let op = operator(&well(0.2), 256, 128.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let pc = spectral_projection_pc(&op, &report).unwrap();
    assert!(pc.condition < 1e10);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_block(&mut rng, &op.grid);
        let once = pc.apply(&x);
        let twice = pc.apply(&once);
        let diff: Vec<Complex64> = once.iter().zip(&twice).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) <= 1e-8 * norm(&x));
    }
    let k = op.grid.wavenumber(100);
    let wave: Vec<f64> = op.grid.nodes().iter().map(|x| (k * x).cos()).collect();
    let hf = block_vector(&wave, &wave);
    let out = pc.apply(&hf);
    let diff: Vec<Complex64> = out.iter().zip(&hf).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) <= 1e-6 * norm(&hf));
}

#[test]
fn deflated_resolvent_at_zero_is_solvable() {
    let op = operator(&well(0.2), 256, 128.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let pc = spectral_projection_pc(&op, &report).unwrap();
    let rhs = pc.apply(&block_vector(&op.phi, &vec![0.0; op.n()]));
    let x = resolvent_apply_deflated(&op, &pc, Complex64::new(0.0, 0.0), 0.0, &rhs).unwrap();
    let lx = op.apply(&x);
    let res: Vec<Complex64> = lx.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    assert!(norm(&res) <= 1e-8 * norm(&rhs).max(1e-300), "{}", norm(&res));
}

#[test]
fn fgr_form_of_zero_vanishes() {
    let op = operator(&well(0.2), 256, 128.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let value = fgr_quadratic_form(&op, &report, &vec![Complex64::new(0.0, 0.0); 2 * op.n()], 1).unwrap();
    assert_eq!(value.re_y, 0.0);
    assert_eq!(value.form_re, 0.0);
}

#[test]
fn eigenvector_pairing_in_the_gap_is_real() {
    // oracle: (L − μ)⁻¹v = v/(iε − μ) for the eigenvector v; the pairing is conjugate-linear in x
    let op = operator(&well(0.2), 256, 128.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let v = mode_vector(report.principal().unwrap());
    let gap = &report.gap_frequencies;
    let mu = Complex64::new(0.0, 0.5 * (gap[0] + gap[1]));
    let dx = op.grid.dx();
    let functional = |x: &[Complex64]| sigma1_pairing(x, &v, dx);
    let sweep = limiting_absorption_sweep(&op, mu, &v, &functional).unwrap();
    let expected = sigma1_pairing(&v, &v, dx) / (Complex64::new(0.0, report.epsilon) - mu).conj();
    assert!(expected.im.abs() < 1e-10);
    assert!(sweep.extrapolated_im.abs() <= 1e-6, "{}", sweep.extrapolated_im);
    assert!((sweep.extrapolated_re - expected.re).abs() <= 1e-6 * expected.re.abs());
}

#[test]
fn embedded_fgr_form_is_negative() {
    let model = well(0.2);
    let op = operator(&model, 512, 128.0);
    let report = near_zero_spectrum(&op, 4).unwrap();
    let order = compute_threshold_order(report.epsilon, report.lambda).unwrap().n;
    assert_eq!(order, 1);
    let pc = spectral_projection_pc(&op, &report).unwrap();
    let mode = report.principal().unwrap();
    let quad: Vec<f64> = (0..op.n()).map(|j| op.phi[j] * mode.xi[j] * mode.xi[j]).collect();
    let cross: Vec<f64> = (0..op.n()).map(|j| op.phi[j] * mode.xi[j] * mode.eta[j]).collect();
    for f in [block_vector(&quad, &vec![0.0; op.n()]), block_vector(&vec![0.0; op.n()], &cross)] {
        let value = fgr_quadratic_form(&op, &report, &pc.apply(&f), order).unwrap();
        assert!(value.shift > op.lambda);
        assert!(value.sign_ok && value.re_y < 0.0, "{value:?}");
        assert!(value.conclusive);
    }
}

#[test]
fn large_h_is_reported_not_rejected() {
    let op = operator(&well(1.0), 256, 64.0);
    let report = near_zero_spectrum(&op, 8).unwrap();
    let flags = condition_diagnostics(&report);
    assert_eq!(flags.discrete_count, report.discrete_count);
    assert!(flags.sb_margin.is_finite());
}
