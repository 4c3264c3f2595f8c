use pchid_core::ou::{
    erf, erfc, fht_density, fht_density_corrected, fht_expectation, fht_monte_carlo,
    mean_state, normalize, simulate_ou, OuParams,
};
use proptest::prelude::*;

#[test]
fn erf_matches_reference_on_grid() {
    let mut worst: f64 = 0.0;
    for i in 0..=12_000 {
        let x = -6.0 + i as f64 * 1e-3;
        worst = worst.max((erf(x) - statrs::function::erf::erf(x)).abs());
        let rel = (erfc(x) - statrs::function::erf::erfc(x)).abs()
            / statrs::function::erf::erfc(x).max(1e-300);
        assert!(rel < 1e-9, "erfc({x}) relative error {rel}");
    }
    assert!(worst < 1e-10, "max |erf - reference| = {worst}");
}

/// Ensemble mean at time `t` against the closed form, within 3 standard
/// errors, on a grid of parameters.
#[test]
fn mean_state_matches_ensemble() {
    let dt: f64 = 1e-3;
    let paths = 10_000;
    for &(eps, sigma, t) in &[
        (0.5f64, 0.3f64, 0.5f64),
        (1.0, 0.5, 1.0),
        (0.2, 1.0, 2.0),
        (1.0, 0.2, 0.25),
    ] {
        let p = OuParams::new(eps, sigma, 1.5, 0.5).unwrap();
        let step = (t / dt).round() as usize;
        let ends: Vec<f64> = (0..paths)
            .map(|i| simulate_ou(&p, dt, t, 1000 + i as u64).unwrap()[step])
            .collect();
        let mean = ends.iter().sum::<f64>() / paths as f64;
        let var = ends.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
        let se = (var / paths as f64).sqrt();
        let expected = mean_state(&p, t).unwrap();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "eps {eps} sigma {sigma} t {t}: {mean} vs {expected} (se {se})"
        );
    }
}

#[test]
fn zero_pull_is_scaled_brownian_motion() {
    let (sigma, t, dt, paths) = (0.7, 1.0, 1e-3, 10_000);
    let p = OuParams::new(0.0, sigma, 0.0, 0.0).unwrap();
    let ends: Vec<f64> = (0..paths)
        .map(|i| *simulate_ou(&p, dt, t, i as u64).unwrap().last().unwrap())
        .collect();
    let m2: Vec<f64> = ends.iter().map(|v| v * v).collect();
    let var = m2.iter().sum::<f64>() / paths as f64;
    let sd = (m2.iter().map(|v| (v - var).powi(2)).sum::<f64>() / (paths - 1) as f64).sqrt();
    let se = sd / (paths as f64).sqrt();
    assert!((var - sigma * sigma * t).abs() < 3.0 * se, "{var} vs {}", sigma * sigma * t);
}

/// Hitting times simulated in original units and rescaled by epsilon agree
/// with hitting times of the normalized process.
#[test]
fn normalization_round_trip() {
    let p = OuParams::new(0.5, 0.8, 1.4, 0.6).unwrap();
    let n = normalize(&p).unwrap();
    let (direct, _) = fht_monte_carlo(&p, 4000, 1e-3, 100.0, 1).unwrap();
    let (scaled, _) =
        fht_monte_carlo(&OuParams::normalized(n.s0_tilde), 4000, 1e-3 * n.time_scale, 50.0, 2)
            .unwrap();
    let recovered = scaled.mean / n.time_scale;
    assert!(
        (recovered - direct.mean).abs() / direct.mean < 0.05,
        "{recovered} vs {}",
        direct.mean
    );
}

#[test]
fn expectation_matches_moderate_monte_carlo() {
    // Smaller run than the acceptance check; the step is still fine enough
    // that the discretization bias stays well inside the tolerance.
    let s0 = 1.0;
    let (mc, _) = fht_monte_carlo(&OuParams::normalized(s0), 10_000, 1e-4, 50.0, 77).unwrap();
    let q = fht_expectation(s0).unwrap();
    assert!((mc.mean - q).abs() / q < 0.05, "{} vs {q}", mc.mean);
    assert_eq!(mc.hit_fraction, 1.0);
}

proptest! {
    #[test]
    fn densities_are_nonnegative(s0 in 0.01f64..5.0, t in 1e-3f64..20.0) {
        prop_assert!(fht_density_corrected(s0, t).unwrap() >= 0.0);
        prop_assert!(fht_density(s0, t).unwrap() >= 0.0);
    }

    #[test]
    fn expectation_is_increasing(a in 0.0f64..4.0, gap in 0.01f64..1.0) {
        prop_assert!(fht_expectation(a + gap).unwrap() > fht_expectation(a).unwrap());
    }

    #[test]
    fn erf_is_odd_and_bounded(x in -10.0f64..10.0) {
        prop_assert_eq!(erf(-x), -erf(x));
        prop_assert!(erf(x).abs() <= 1.0);
    }
}
