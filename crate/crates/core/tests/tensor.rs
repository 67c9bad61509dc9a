use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use poolerleak::model::{SELU_ALPHA, SELU_LAMBDA};
use poolerleak::recon::optimal_assignment;
use poolerleak::tensor::{
    decompose, estimate_t_ce, estimate_t_mse, estimate_t_relu_h4, hermite2, hermite3, hermite4_contract,
    low_order_residual, symmetrize,
};
use poolerleak::{Activation, DecomposeMethod, SymTensor3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use statrs::distribution::{ContinuousCDF, Normal};

fn gaussian_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, d, |_, _| rng.sample(StandardNormal))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    v.normalize()
}

fn e(d: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(d);
    v[i] = 1.0;
    v
}

/// E[σ'''(Z)] for Z ~ N(0, s²), in closed form.
///
/// SELU's first derivative jumps at 0, so its third derivative carries a
/// point-mass term that a pointwise evaluation misses.
fn third_derivative_expectation(act: Activation, s: f64) -> f64 {
    match act {
        Activation::CubeSquare => 6.0,
        Activation::Selu => {
            let phi = Normal::new(0.0, 1.0).unwrap().cdf(-s);
            SELU_LAMBDA * SELU_ALPHA * ((s * s / 2.0).exp() * phi - 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt()))
        }
        _ => unreachable!(),
    }
}

#[test]
fn hermite_examples() {
    assert_eq!(hermite2(&DVector::zeros(3)), -DMatrix::<f64>::identity(3, 3));
    assert_eq!(hermite2(&e(2, 0)), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]));
    assert!(hermite3(&DVector::zeros(4)).as_slice().iter().all(|&v| v == 0.0));
    let h = hermite3(&e(2, 0));
    assert_eq!(h.get(0, 0, 0), -2.0);
    assert_eq!(h.get(0, 1, 1), -1.0);
    assert_eq!(h.get(1, 1, 1), 0.0);
    // closed form at w = 0: δ_ab u_c + δ_ac u_b + δ_bc u_a
    let u = DVector::from_vec(vec![0.6, -0.8, 0.0]);
    let h4 = hermite4_contract(&DVector::zeros(3), &u);
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                let want = (a == b) as u8 as f64 * u[c] + (a == c) as u8 as f64 * u[b] + (b == c) as u8 as f64 * u[a];
                assert_eq!(h4.get(a, b, c), want);
            }
        }
    }
}

#[test]
fn hermite3_has_zero_gaussian_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let d = 3;
    let mut acc = SymTensor3::zeros(d);
    let mut sq = SymTensor3::zeros(d);
    for _ in 0..n {
        let w = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let h = hermite3(&w);
        acc.axpy(1.0 / n as f64, &h);
        let h2 = SymTensor3::from_fn(d, |a, b, c| h.get(a, b, c).powi(2));
        sq.axpy(1.0 / n as f64, &h2);
    }
    for (m, s) in acc.as_slice().iter().zip(sq.as_slice()) {
        let se = ((s - m * m) / n as f64).sqrt();
        assert!(m.abs() < 4.0 * se, "{m} vs se {se}");
    }
}

/// Per-entry Monte-Carlo mean and standard error of f(W)·H_p(W) terms.
struct Moments {
    mean: Vec<f64>,
    se: Vec<f64>,
}

fn mc_moments(n: usize, d: usize, seed: u64, mut sample: impl FnMut(&DVector<f64>) -> Vec<f64>) -> Moments {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<f64> = Vec::new();
    let mut s2: Vec<f64> = Vec::new();
    for _ in 0..n {
        let w = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let v = sample(&w);
        if s.is_empty() {
            s = vec![0.0; v.len()];
            s2 = vec![0.0; v.len()];
        }
        for (k, x) in v.iter().enumerate() {
            s[k] += x;
            s2[k] += x * x;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / nf).collect();
    let se = s2.iter().zip(&mean).map(|(q, m)| ((q / nf - m * m).max(0.0) / nf).sqrt()).collect();
    Moments { mean, se }
}

fn within_4se(m: &Moments, want: &[f64]) -> (usize, f64) {
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for (k, &w) in want.iter().enumerate() {
        let z = (m.mean[k] - w).abs() / m.se[k].max(1e-300);
        if m.se[k] == 0.0 && m.mean[k] == w {
            continue;
        }
        worst = worst.max(z);
        if z > 4.0 {
            bad += 1;
        }
    }
    (bad, worst)
}

#[test]
fn stein_identity_third_order_selu_and_cube_square() {
    let d = 8;
    for (act, seed) in [(Activation::Selu, 3u64), (Activation::CubeSquare, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = unit(&mut rng, d) * 0.9;
        let moments = mc_moments(1_000_000, d, seed + 100, |w| {
            let g = act.eval(w.dot(&x), 0);
            let h = hermite3(w);
            h.as_slice().iter().map(|v| g * v).collect()
        });
        let c3 = third_derivative_expectation(act, x.norm());
        let want = SymTensor3::from_components(&[c3], &DMatrix::from_row_slice(1, d, x.as_slice()));
        let (bad, worst) = within_4se(&moments, want.as_slice());
        assert_eq!(bad, 0, "{act:?}: worst z {worst}");
    }
}

#[test]
fn stein_identity_first_and_second_order() {
    // g(w) = sin(wᵀx) + (wᵀx)²
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = unit(&mut rng, d) * 0.8;
    let s2 = x.norm_squared();
    let g = |w: &DVector<f64>| {
        let z = w.dot(&x);
        z.sin() + z * z
    };
    // E[sin'(Z)] = e^{-s²/2}, E[(z²)'] = 0; E[sin''] = 0, E[(z²)''] = 2
    let m1 = mc_moments(400_000, d, 6, |w| (w * g(w)).as_slice().to_vec());
    let want1: Vec<f64> = x.iter().map(|v| (-s2 / 2.0).exp() * v).collect();
    assert_eq!(within_4se(&m1, &want1).0, 0);
    let m2 = mc_moments(400_000, d, 7, |w| (hermite2(w) * g(w)).as_slice().to_vec());
    let want2 = (&x * x.transpose() * 2.0).as_slice().to_vec();
    assert_eq!(within_4se(&m2, &want2).0, 0);
}

#[test]
fn symmetrize_examples() {
    let raw = SymTensor3::from_fn(2, |a, b, c| (a == 0 && b == 1 && c == 1) as u8 as f64);
    let s = symmetrize(&raw);
    for (a, b, c) in [(0, 1, 1), (1, 0, 1), (1, 1, 0)] {
        assert_relative_eq!(s.get(a, b, c), 1.0 / 3.0, epsilon = 1e-15);
    }
    assert_eq!(s.as_slice().iter().filter(|&&v| v != 0.0).count(), 3);
    let h = hermite3(&DVector::from_vec(vec![0.3, -1.2, 0.5]));
    assert!(symmetrize(&h).sub(&h).frobenius_norm() < 1e-15);
    assert!(symmetrize(&SymTensor3::zeros(3)).frobenius_norm() == 0.0);
}

#[test]
fn zero_gradients_give_zero_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = gaussian_rows(&mut rng, 300, 5);
    let u = unit(&mut rng, 5);
    assert_eq!(estimate_t_mse(&DVector::zeros(300), &w).unwrap().frobenius_norm(), 0.0);
    assert_eq!(estimate_t_ce(&DMatrix::zeros(300, 5), &w).unwrap().frobenius_norm(), 0.0);
    assert_eq!(estimate_t_relu_h4(&DVector::zeros(300), &w, &u).unwrap().frobenius_norm(), 0.0);
    assert!(estimate_t_relu_h4(&DVector::zeros(300), &w, &(u * 2.0)).is_err());
    assert!(estimate_t_mse(&DVector::zeros(0), &DMatrix::zeros(0, 5)).is_err());
    let mut bad = DVector::zeros(300);
    bad[3] = f64::NAN;
    assert!(estimate_t_mse(&bad, &w).is_err());
}

/// g_j = σ(w_jᵀx) for a single input with unit residual.
fn single_input_mse(act: Activation, w: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(w.nrows(), |j, _| act.eval(w.row(j).transpose().dot(x), 0))
}

fn relative_error(t: &SymTensor3, truth: &SymTensor3) -> f64 {
    t.sub(truth).frobenius_norm() / truth.frobenius_norm()
}

#[test]
fn cube_square_mse_estimate_of_single_basis_input() {
    let d = 4;
    let x = e(d, 0);
    let truth = SymTensor3::from_components(&[6.0], &DMatrix::from_row_slice(1, d, x.as_slice()));
    let mut errs = Vec::new();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian_rows(&mut rng, 20_000, d);
        let g = single_input_mse(Activation::CubeSquare, &w, &x);
        errs.push(relative_error(&estimate_t_mse(&g, &w).unwrap(), &truth));
    }
    // Expected RMS error from the per-entry variance of g·H₃ (x = e₁,
    // g = w₁³ + w₁²): sqrt(Σ Var / m) / 6 = 0.165 at m = 2·10⁴. The mean of
    // the Frobenius error sits a little under its RMS.
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!((0.6 * 0.165..=1.1 * 0.165).contains(&mean), "{errs:?}");
}

#[test]
fn mse_estimator_error_scales_as_inverse_root_m() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = unit(&mut rng, d);
    let truth = SymTensor3::from_components(&[6.0], &DMatrix::from_row_slice(1, d, x.as_slice()));
    let mean_err = |m: usize, salt: u64| {
        (0..20u64)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(salt * 1000 + t);
                let w = gaussian_rows(&mut rng, m, d);
                let g = single_input_mse(Activation::CubeSquare, &w, &x);
                relative_error(&estimate_t_mse(&g, &w).unwrap(), &truth)
            })
            .sum::<f64>()
            / 20.0
    };
    let small = mean_err(10_000, 1);
    let large = mean_err(40_000, 2);
    let ratio = large / small;
    assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn mse_estimator_error_falls_with_m() {
    let d = 3;
    let x = e(d, 1);
    let truth = SymTensor3::from_components(&[6.0], &DMatrix::from_row_slice(1, d, x.as_slice()));
    let mut prev = f64::INFINITY;
    for m in [1_000, 4_000, 16_000] {
        let mean = (0..20u64)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(m as u64 + t);
                let w = gaussian_rows(&mut rng, m, d);
                relative_error(&estimate_t_mse(&single_input_mse(Activation::CubeSquare, &w, &x), &w).unwrap(), &truth)
            })
            .sum::<f64>()
            / 20.0;
        assert!(mean < prev, "m={m}: {mean} !< {prev}");
        prev = mean;
    }
}

fn leading_direction(t: &SymTensor3) -> DVector<f64> {
    let dec = decompose(t, 1, DecomposeMethod::Jennrich, 0).unwrap();
    dec.components.row(0).transpose()
}

#[test]
fn ce_and_mse_paths_agree_on_a_single_input() {
    let d = 4;
    let m = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = e(d, 0);
    let w = gaussian_rows(&mut rng, m, d);
    let t_mse = estimate_t_mse(&single_input_mse(Activation::CubeSquare, &w, &x), &w).unwrap();
    // ĝ_j = a_j σ'(w_jᵀx) x with a_j = 1/m
    let grads =
        DMatrix::from_fn(m, d, |j, c| Activation::CubeSquare.eval(w.row(j).transpose().dot(&x), 1) * x[c] / m as f64);
    let t_ce = estimate_t_ce(&grads, &w).unwrap();
    assert!(t_ce.max_asymmetry() < 1e-12);
    let cos = leading_direction(&t_mse).dot(&leading_direction(&t_ce)).abs();
    assert!(cos > 0.95, "{cos}");
}

#[test]
fn relu_fourth_order_path_finds_single_input() {
    let d = 6;
    let m = 40_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = unit(&mut rng, d);
    let w = gaussian_rows(&mut rng, m, d);
    let u = unit(&mut rng, d);
    let g = single_input_mse(Activation::Relu, &w, &x);
    let t = estimate_t_relu_h4(&g, &w, &u).unwrap();
    let cos = leading_direction(&t).dot(&x).abs();
    assert!(cos > 0.8, "{cos}");
}

#[test]
fn control_variate_removes_low_order_fit_and_keeps_the_signal() {
    let d = 4;
    let m = 20_000;
    let x = e(d, 0);
    let truth = SymTensor3::from_components(&[6.0], &DMatrix::from_row_slice(1, d, x.as_slice()));
    let mut plain = 0.0;
    let mut reduced = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let w = gaussian_rows(&mut rng, m, d);
        let g = single_input_mse(Activation::CubeSquare, &w, &x);
        let r = low_order_residual(&DMatrix::from_column_slice(m, 1, g.as_slice()), &w).unwrap();
        plain += relative_error(&estimate_t_mse(&g, &w).unwrap(), &truth);
        reduced += relative_error(&estimate_t_mse(&r.column(0).into_owned(), &w).unwrap(), &truth);
    }
    assert!(reduced < plain, "{reduced} vs {plain}");
    // expected RMS with the residual is 0.12 at this m
    assert!(reduced / 5.0 < 0.15, "{}", reduced / 5.0);
}

fn random_instance(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mag = Uniform::new(0.5, 2.0).unwrap();
    let weights = (0..b).map(|_| rng.sample(mag) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut comps = DMatrix::zeros(b, d);
    for i in 0..b {
        comps.row_mut(i).copy_from(&unit(rng, d).transpose());
    }
    (weights, comps)
}

fn matched_cosines(found: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    let score = DMatrix::from_fn(truth.nrows(), found.nrows(), |i, k| truth.row(i).dot(&found.row(k)).abs());
    let slot = optimal_assignment(&score);
    (0..truth.nrows()).map(|i| score[(i, slot[i])]).collect()
}

#[test]
fn decomposition_examples() {
    let t = SymTensor3::from_components(&[1.0], &DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]));
    let dec = decompose(&t, 1, DecomposeMethod::Jennrich, 0).unwrap();
    assert!(dec.residual < 1e-10);
    assert_relative_eq!(dec.components[(0, 0)].abs(), 1.0, epsilon = 1e-10);
    assert_relative_eq!(dec.weights[0] * dec.components[(0, 0)].powi(3), 1.0, epsilon = 1e-10);

    let comps = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let t = SymTensor3::from_components(&[2.0, -1.0], &comps);
    let dec = decompose(&t, 2, DecomposeMethod::Jennrich, 0).unwrap();
    assert!(dec.residual < 1e-8);
    for i in 0..2 {
        let axis =
            (0..3).max_by(|&a, &b| dec.components[(i, a)].abs().total_cmp(&dec.components[(i, b)].abs())).unwrap();
        let signed = dec.weights[i] * dec.components[(i, axis)].powi(3);
        assert_relative_eq!(signed, if axis == 0 { 2.0 } else { -1.0 }, epsilon = 1e-8);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, comps) = random_instance(&mut rng, 4, 50);
    let dec = decompose(&SymTensor3::from_components(&w, &comps), 4, DecomposeMethod::Jennrich, 1).unwrap();
    assert!(matched_cosines(&dec.components, &comps).iter().all(|&c| c > 0.999));
    assert!(decompose(&t, 4, DecomposeMethod::Jennrich, 0).is_err());
}

#[test]
fn exact_low_rank_tensors_recovered_in_most_trials() {
    let mut ok = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + trial);
        let b = rng.random_range(1..=8);
        let d = rng.random_range(b.max(8)..=64);
        let (w, comps) = random_instance(&mut rng, b, d);
        let t = SymTensor3::from_components(&w, &comps);
        if let Ok(dec) = decompose(&t, b, DecomposeMethod::Jennrich, trial) {
            if dec.residual < 1e-6 && matched_cosines(&dec.components, &comps).iter().all(|&c| c > 0.999) {
                ok += 1;
            }
        }
    }
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn power_deflation_cross_checks_jennrich() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (w, comps) = random_instance(&mut rng, 3, 12);
    let t = SymTensor3::from_components(&w, &comps);
    let a = decompose(&t, 3, DecomposeMethod::Jennrich, 0).unwrap();
    let b = decompose(&t, 3, DecomposeMethod::PowerDeflation, 0).unwrap();
    assert!(a.residual < 1e-8);
    assert!(b.residual < 1e-4, "{}", b.residual);
    assert!(matched_cosines(&b.components, &comps).iter().all(|&c| c > 0.99));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_components_are_unit_and_ordered(seed in 0u64..10_000, b in 1usize..5, d in 5usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, comps) = random_instance(&mut rng, b, d);
        let dec = decompose(&SymTensor3::from_components(&w, &comps), b, DecomposeMethod::Jennrich, seed).unwrap();
        for i in 0..b {
            prop_assert!((dec.components.row(i).norm() - 1.0).abs() < 1e-12);
        }
        for i in 1..b {
            prop_assert!(dec.weights[i - 1].abs() >= dec.weights[i].abs());
        }
        prop_assert!(dec.residual < 1e-6);
    }

    #[test]
    fn symmetrize_is_cyclic_invariant(seed in 0u64..10_000, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = SymTensor3::from_fn(d, |_, _, _| rng.sample(StandardNormal));
        let s = symmetrize(&raw);
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    prop_assert!((s.get(a, b, c) - s.get(c, a, b)).abs() < 1e-12);
                    prop_assert!((s.get(a, b, c) - s.get(b, c, a)).abs() < 1e-12);
                }
            }
        }
        // idempotent on its own output
        prop_assert!(symmetrize(&s).sub(&s).frobenius_norm() < 1e-12);
    }

    #[test]
    fn ce_estimate_is_fully_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian_rows(&mut rng, 64, 4);
        let g = gaussian_rows(&mut rng, 64, 4);
        prop_assert!(estimate_t_ce(&g, &w).unwrap().max_asymmetry() < 1e-12);
    }
}
