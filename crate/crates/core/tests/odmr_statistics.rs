use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use nvf_core::constants::gyromagnetic_ratio;
use nvf_core::control::moments;
use nvf_core::magnetostatics::NvSensor;
use nvf_core::odmr::{fit_esr, frequency_grid, lockin_contrast, simulate_lockin_spectrum, LockinTiming};
use nvf_core::Error;
use rand_distr::{Distribution, Poisson};

/// Returns the interquartile scatter of the fitted splitting (normal-equivalent)
/// and the fraction of fits more than 10 such widths from the median.
fn splitting_scatter(dwell: f64) -> (f64, f64) {
    let grid = frequency_grid(2.87e9, 40e6, 81);
    let b = 42.3e6 / (2.0 * gyromagnetic_ratio());
    let nv = NvSensor::default();
    let mut splittings: Vec<f64> = (0..150u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + (dwell * 100.0) as u64);
            let s = simulate_lockin_spectrum(&grid, b, &nv, &LockinTiming::default(), dwell, 0.0, Some(&mut rng)).unwrap();
            fit_esr(&s).unwrap().splitting()
        })
        .collect();
    splittings.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| splittings[(p * (splittings.len() - 1) as f64).round() as usize];
    let width = (q(0.75) - q(0.25)) / 1.349;
    let median = q(0.5);
    let gross = splittings.iter().filter(|s| (*s - median).abs() > 10.0 * width).count();
    (width, gross as f64 / splittings.len() as f64)
}

#[test]
fn frequency_scatter_follows_inverse_root_dwell() {
    let (s025, gross025) = splitting_scatter(0.25);
    let (s1, gross1) = splitting_scatter(1.0);
    let (s4, gross4) = splitting_scatter(4.0);
    assert!(gross025 <= 0.05 && gross1 == 0.0 && gross4 == 0.0, "gross outliers {gross025} {gross1} {gross4}");
    for (ratio, name) in [(s025 / s1, "0.25 s vs 1 s"), (s1 / s4, "1 s vs 4 s")] {
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{name}: ratio {ratio}");
    }
}

#[test]
fn contrast_estimator_is_unbiased() {
    let (rate, c_true, duty, dwell) = (45_000.0, 0.053, 0.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let on = Poisson::new(rate * (1.0 - c_true) * dwell * duty).unwrap();
    let off = Poisson::new(rate * dwell * (1.0 - duty)).unwrap();
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let (c, _) = lockin_contrast(on.sample(&mut rng), off.sample(&mut rng), duty);
            c
        })
        .collect();
    let (mean, sd, _) = moments(&draws);
    let stderr = sd / (draws.len() as f64).sqrt();
    assert!((mean + c_true).abs() < 3.0 * stderr, "mean {mean} vs {} ± {stderr}", -c_true);
}

#[test]
fn zero_splitting_is_not_reported_as_resolved() {
    let grid = frequency_grid(2.87e9, 40e6, 81);
    for fwhm in [5e6, 7.2e6, 10e6] {
        let nv = NvSensor { linewidth_fwhm_hz: fwhm, ..NvSensor::default() };
        let s = simulate_lockin_spectrum(&grid, 0.0, &nv, &LockinTiming::default(), 1.0, 0.0, None).unwrap();
        match fit_esr(&s) {
            Err(Error::UnresolvedSpectrum(_)) => {}
            Ok(fit) => assert!(fit.splitting() <= fwhm / 100.0, "{fit:?}"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}

#[test]
fn noiseless_grid_round_trip() {
    let grid = frequency_grid(2.87e9, 40e6, 81);
    for splitting in [10e6, 20e6, 42.3e6] {
        for fwhm in [5e6, 7.2e6, 10e6] {
            let nv = NvSensor { linewidth_fwhm_hz: fwhm, ..NvSensor::default() };
            let b = splitting / (2.0 * gyromagnetic_ratio());
            let s = simulate_lockin_spectrum(&grid, b, &nv, &LockinTiming::default(), 1.0, 0.0, None).unwrap();
            let p = fit_esr(&s).unwrap().params;
            let rel = |a: f64, b: f64| (a - b).abs() / b;
            assert!(rel(p.f_minus, 2.87e9 - splitting / 2.0) < 1e-6);
            assert!(rel(p.f_plus, 2.87e9 + splitting / 2.0) < 1e-6);
            assert!(rel(p.fwhm, fwhm) < 1e-6, "{splitting} {fwhm}: {p:?}");
            assert!(rel(p.contrast, nv.contrast) < 1e-6);
        }
    }
}
