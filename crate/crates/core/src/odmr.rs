//! Lock-in ODMR spectra: synthesis with photon shot noise, Lorentzian-pair
//! fitting, Zeeman inversion and shot-noise-limited sensitivity.
//!
//! The lock-in contrast at microwave frequency f is
//! `C(f) = (I_on − I_off) / I_off`. Each spectrum point aggregates the
//! photon counts of all on and off half-cycles within its dwell time, which
//! carries the same statistics as simulating every modulation cycle.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::constants::gyromagnetic_ratio;
use crate::lsq::{levenberg_marquardt, LmOptions, Residuals};
use crate::magnetostatics::{check_positive, zeeman_frequencies, NvSensor};
use crate::{Error, Result};

pub use crate::magnetostatics::{field_to_splitting, splitting_to_field};

/// Prefactor of the shot-noise-limited sensitivity for Lorentzian lines.
pub const LORENTZIAN_SENSITIVITY_FACTOR: f64 = 0.77;

/// Minimum number of modulation periods per spectrum point.
pub const MIN_PERIODS_PER_POINT: f64 = 10.0;

/// Normalized Lorentzian with unit peak and full width `fwhm`.
pub fn lorentzian(f: f64, f0: f64, fwhm: f64) -> f64 {
    let g2 = 0.25 * fwhm * fwhm;
    let u = f - f0;
    g2 / (u * u + g2)
}

/// Parameters of the two-dip contrast model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsrParams {
    pub f_minus: f64,
    pub f_plus: f64,
    pub fwhm: f64,
    /// Depth C₀ of each dip.
    pub contrast: f64,
    pub baseline: f64,
}

impl EsrParams {
    pub fn splitting(&self) -> f64 {
        self.f_plus - self.f_minus
    }
}

/// `C(f) = baseline − C₀·[L(f; f−, Γ) + L(f; f+, Γ)]`.
pub fn esr_contrast_model(f: f64, p: &EsrParams) -> f64 {
    p.baseline - p.contrast * (lorentzian(f, p.f_minus, p.fwhm) + lorentzian(f, p.f_plus, p.fwhm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockinTiming {
    pub modulation_rate_hz: f64,
    /// Fraction of each cycle with the microwave on.
    pub duty: f64,
}

impl Default for LockinTiming {
    fn default() -> Self {
        Self { modulation_rate_hz: 1000.0, duty: 0.5 }
    }
}

impl LockinTiming {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.modulation_rate_hz, &format!("{prefix}.modulation_rate_hz"))?;
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(Error::config(format!("{prefix}.duty"), "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Acquisition settings for spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdmrConfig {
    pub timing: LockinTiming,
    pub dwell_per_point_s: f64,
    pub grid_center_hz: f64,
    pub grid_half_span_hz: f64,
    pub grid_points: usize,
}

impl Default for OdmrConfig {
    fn default() -> Self {
        Self {
            timing: LockinTiming::default(),
            dwell_per_point_s: 1.0,
            grid_center_hz: 2.870e9,
            grid_half_span_hz: 40e6,
            grid_points: 81,
        }
    }
}

impl OdmrConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        self.timing.validate(&format!("{prefix}.timing"))?;
        check_positive(self.dwell_per_point_s, &format!("{prefix}.dwell_per_point_s"))?;
        if self.dwell_per_point_s * self.timing.modulation_rate_hz < MIN_PERIODS_PER_POINT {
            return Err(Error::config(
                format!("{prefix}.dwell_per_point_s"),
                "must cover at least 10 modulation periods",
            ));
        }
        check_positive(self.grid_center_hz, &format!("{prefix}.grid_center_hz"))?;
        check_positive(self.grid_half_span_hz, &format!("{prefix}.grid_half_span_hz"))?;
        if self.grid_points < 8 {
            return Err(Error::config(format!("{prefix}.grid_points"), "need at least 8 points"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        frequency_grid(self.grid_center_hz, self.grid_half_span_hz, self.grid_points)
    }

    /// Wall-clock time to acquire one spectrum.
    pub fn acquisition_time_s(&self) -> f64 {
        self.dwell_per_point_s * self.grid_points as f64
    }
}

/// Evenly spaced grid `center ± half_span` with `points` points.
pub fn frequency_grid(center: f64, half_span: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![center];
    }
    (0..points)
        .map(|i| center - half_span + 2.0 * half_span * i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsrSpectrum {
    pub frequencies: Vec<f64>,
    pub contrast: Vec<f64>,
    pub contrast_sigma: Vec<f64>,
    pub dwell_per_point: f64,
}

impl EsrSpectrum {
    pub const CSV_HEADER: &'static str = "freq_Hz,contrast,contrast_sigma";

    pub fn validate(&self) -> Result<()> {
        let n = self.frequencies.len();
        if n < 8 {
            return Err(Error::domain(format!("spectrum needs at least 8 points (got {n})")));
        }
        if self.contrast.len() != n || self.contrast_sigma.len() != n {
            return Err(Error::domain("spectrum columns have unequal lengths"));
        }
        if self.frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("spectrum frequencies must be strictly increasing"));
        }
        if self.contrast_sigma.iter().any(|s| !(*s >= 0.0)) || self.contrast.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("spectrum contains invalid contrast or sigma values"));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for i in 0..self.frequencies.len() {
            let _ = writeln!(out, "{:.1},{:.9e},{:.9e}", self.frequencies[i], self.contrast[i], self.contrast_sigma[i]);
        }
        out
    }

    /// Parses the CSV written by [`Self::to_csv`]. Dwell time is not stored
    /// and comes back as zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::domain("empty spectrum file"))?;
        if header.trim() != Self::CSV_HEADER {
            return Err(Error::domain(format!("unexpected spectrum header `{header}`")));
        }
        let mut s = EsrSpectrum { frequencies: vec![], contrast: vec![], contrast_sigma: vec![], dwell_per_point: 0.0 };
        for (row, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::domain(format!("row {}: expected 3 columns", row + 1)));
            }
            let parse = |c: &str| {
                c.parse::<f64>().map_err(|e| Error::domain(format!("row {}: {e}", row + 1)))
            };
            s.frequencies.push(parse(cols[0])?);
            s.contrast.push(parse(cols[1])?);
            s.contrast_sigma.push(parse(cols[2])?);
        }
        s.validate()?;
        Ok(s)
    }
}

/// Observed contrast after dilution by uncorrelated background counts.
pub fn diluted_contrast(c_true: f64, count_rate: f64, background: f64) -> f64 {
    c_true * count_rate / (count_rate + background)
}

/// One lock-in point from on/off counts: contrast and its first-order
/// standard error.
pub fn lockin_contrast(n_on: f64, n_off: f64, duty: f64) -> (f64, f64) {
    let ratio = (1.0 - duty) / duty;
    let c = n_on * ratio / n_off - 1.0;
    // Var(N) = N for Poisson counts; a zero on-count still carries ≥ 1 count of
    // uncertainty.
    let on = n_on.max(1.0);
    let sigma = ratio * (on / (n_off * n_off) + on * on / (n_off * n_off * n_off)).sqrt();
    (c, sigma)
}

/// Synthesizes a spectrum for a constant projected field.
///
/// `rng = None` selects the infinite-count limit: counts equal their
/// expectations, so the reported contrast is the diluted model exactly and
/// the sigmas are the expected shot-noise errors.
pub fn simulate_lockin_spectrum(
    freq_grid: &[f64],
    b_parallel: f64,
    nv: &NvSensor,
    timing: &LockinTiming,
    dwell_per_point: f64,
    background_cps: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<EsrSpectrum> {
    let n = freq_grid.len();
    simulate_lockin_spectrum_varying(
        freq_grid,
        &vec![b_parallel; n],
        &vec![background_cps; n],
        nv,
        timing,
        dwell_per_point,
        rng,
    )
}

/// As [`simulate_lockin_spectrum`], with the projected field and background
/// allowed to change from point to point (e.g. a moving bead).
pub fn simulate_lockin_spectrum_varying(
    freq_grid: &[f64],
    b_parallel: &[f64],
    background_cps: &[f64],
    nv: &NvSensor,
    timing: &LockinTiming,
    dwell_per_point: f64,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<EsrSpectrum> {
    if dwell_per_point * timing.modulation_rate_hz < MIN_PERIODS_PER_POINT {
        return Err(Error::domain("dwell per point must cover at least 10 modulation periods"));
    }
    if b_parallel.len() != freq_grid.len() || background_cps.len() != freq_grid.len() {
        return Err(Error::domain("per-point field/background length differs from the grid"));
    }
    let r = nv.count_rate_cps;
    let duty = timing.duty;
    let mut spectrum = EsrSpectrum {
        frequencies: freq_grid.to_vec(),
        contrast: Vec::with_capacity(freq_grid.len()),
        contrast_sigma: Vec::with_capacity(freq_grid.len()),
        dwell_per_point,
    };
    for (index, &f) in freq_grid.iter().enumerate() {
        let (f_minus, f_plus) = zeeman_frequencies(b_parallel[index], nv.zero_field_splitting_hz)?;
        let params = EsrParams { f_minus, f_plus, fwhm: nv.linewidth_fwhm_hz, contrast: nv.contrast, baseline: 0.0 };
        let c_true = esr_contrast_model(f, &params);
        let b = background_cps[index];
        let mean_off = (r + b) * dwell_per_point * (1.0 - duty);
        let mean_on = (r * (1.0 + c_true) + b) * dwell_per_point * duty;
        let (n_on, n_off) = match rng.as_deref_mut() {
            None => (mean_on, mean_off),
            Some(rng) => (poisson(mean_on, rng), poisson(mean_off, rng)),
        };
        if n_off <= 0.0 {
            return Err(Error::InsufficientCounts { index });
        }
        let (c, sigma) = lockin_contrast(n_on, n_off, duty);
        spectrum.contrast.push(c);
        spectrum.contrast_sigma.push(sigma);
    }
    Ok(spectrum)
}

fn poisson(mean: f64, rng: &mut dyn RngCore) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng)
}

/// Result of a Lorentzian-pair fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EsrFit {
    pub params: EsrParams,
    /// One-sigma uncertainties of each field of `params`.
    pub sigmas: EsrParams,
    /// One-sigma uncertainty of `f+ − f−`, including their covariance.
    pub splitting_sigma: f64,
    /// √χ² of the weighted residuals.
    pub residual_norm: f64,
    pub degrees_of_freedom: usize,
}

impl EsrFit {
    pub fn splitting(&self) -> f64 {
        self.params.splitting()
    }

    pub fn to_key_value(&self) -> String {
        let p = &self.params;
        let s = &self.sigmas;
        let mut out = String::new();
        let _ = writeln!(out, "f_minus_Hz={:.3}", p.f_minus);
        let _ = writeln!(out, "f_plus_Hz={:.3}", p.f_plus);
        let _ = writeln!(out, "fwhm_Hz={:.3}", p.fwhm);
        let _ = writeln!(out, "contrast={:.9e}", p.contrast);
        let _ = writeln!(out, "baseline={:.9e}", p.baseline);
        let _ = writeln!(out, "sigma_f_minus_Hz={:.3}", s.f_minus);
        let _ = writeln!(out, "sigma_f_plus_Hz={:.3}", s.f_plus);
        let _ = writeln!(out, "sigma_fwhm_Hz={:.3}", s.fwhm);
        let _ = writeln!(out, "sigma_contrast={:.9e}", s.contrast);
        let _ = writeln!(out, "sigma_baseline={:.9e}", s.baseline);
        let _ = writeln!(out, "sigma_splitting_Hz={:.3}", self.splitting_sigma);
        let _ = writeln!(out, "residual_norm={:.6}", self.residual_norm);
        out
    }
}

/// Weighted residuals of the two-dip model in scaled units: frequencies in
/// MHz relative to `center`.
struct EsrProblem<'a> {
    x_mhz: Vec<f64>,
    y: &'a [f64],
    inv_sigma: Vec<f64>,
}

impl Residuals for EsrProblem<'_> {
    fn len(&self) -> usize {
        self.x_mhz.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let params = EsrParams { f_minus: p[0], f_plus: p[1], fwhm: p[2], contrast: p[3], baseline: p[4] };
        for i in 0..self.x_mhz.len() {
            out[i] = (self.y[i] - esr_contrast_model(self.x_mhz[i], &params)) * self.inv_sigma[i];
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let g = 0.5 * p[2];
        let g2 = g * g;
        for (i, &x) in self.x_mhz.iter().enumerate() {
            let w = self.inv_sigma[i];
            let mut d_gamma = 0.0;
            let mut l_sum = 0.0;
            for (j, &f0) in [p[0], p[1]].iter().enumerate() {
                let u = x - f0;
                let den = u * u + g2;
                let l = g2 / den;
                let dl_df0 = 2.0 * g2 * u / (den * den);
                d_gamma += g * u * u / (den * den);
                l_sum += l;
                // r = (y − m)/σ and ∂m/∂f0 = −C₀·∂L/∂f0.
                jac[(i, j)] = p[3] * dl_df0 * w;
            }
            jac[(i, 2)] = p[3] * d_gamma * w;
            jac[(i, 3)] = l_sum * w;
            jac[(i, 4)] = -w;
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_filter(values: &[f64], half_window: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half_window);
            let hi = (i + half_window + 1).min(n);
            let mut w = values[lo..hi].to_vec();
            median(&mut w)
        })
        .collect()
}

/// Starting guess: the two deepest well-separated local minima of the
/// median-smoothed spectrum.
fn initial_guess(spectrum: &EsrSpectrum) -> Result<EsrParams> {
    let y = &spectrum.contrast;
    let f = &spectrum.frequencies;
    let n = y.len();
    let smooth = median_filter(y, 2);
    let baseline = median(&mut y.clone());

    let mut minima: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = if i == 0 { f64::INFINITY } else { smooth[i - 1] };
            let right = if i + 1 == n { f64::INFINITY } else { smooth[i + 1] };
            smooth[i] < left && smooth[i] <= right && smooth[i] < baseline
        })
        .collect();
    minima.sort_by(|&a, &b| smooth[a].total_cmp(&smooth[b]));

    let Some(&first) = minima.first() else {
        return Err(Error::UnresolvedSpectrum("no dip found".into()));
    };
    let depth1 = baseline - smooth[first];
    let second = minima
        .iter()
        .copied()
        .find(|&i| i.abs_diff(first) >= 2 && baseline - smooth[i] >= 0.25 * depth1)
        .ok_or_else(|| Error::UnresolvedSpectrum("fewer than 2 detectable dips".into()))?;

    let (lo, hi) = if first < second { (first, second) } else { (second, first) };
    let depth = 0.5 * (depth1 + baseline - smooth[second]);

    // Half-depth width of the outer flank of the deeper dip.
    let half_level = baseline - 0.5 * depth1;
    let step_out: isize = if first == lo { -1 } else { 1 };
    let mut k = first as isize;
    while k > 0 && (k as usize) < n - 1 && smooth[k as usize] < half_level {
        k += step_out;
    }
    let df = (f[1] - f[0]).abs();
    let half_width = (f[k as usize] - f[first]).abs();
    let fwhm = (2.0 * half_width).clamp(2.0 * df, (f[hi] - f[lo]).max(2.0 * df));

    Ok(EsrParams { f_minus: f[lo], f_plus: f[hi], fwhm, contrast: depth, baseline })
}

/// Extra starting guesses from a Lorentzian matched filter: every pair of
/// the strongest filter responses at a few trial widths.
fn matched_filter_guesses(spectrum: &EsrSpectrum, baseline: f64) -> Vec<EsrParams> {
    let f = &spectrum.frequencies;
    let n = f.len();
    let df = (f[n - 1] - f[0]).abs() / (n - 1) as f64;
    let weights: Vec<f64> = spectrum.contrast_sigma.iter().map(|&s| if s > 0.0 { 1.0 / (s * s) } else { 1.0 }).collect();
    let mut out = Vec::new();
    for width_steps in [3.0, 6.0, 12.0] {
        let w = width_steps * df;
        // Least-squares depth of a single dip of width w centered at f[i].
        let score: Vec<f64> = (0..n)
            .map(|i| {
                let (mut num, mut den) = (0.0, 0.0);
                for k in 0..n {
                    let l = lorentzian(f[k], f[i], w);
                    num += weights[k] * l * (baseline - spectrum.contrast[k]);
                    den += weights[k] * l * l;
                }
                num / den.sqrt()
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| score[b].total_cmp(&score[a]));
        let mut peaks: Vec<usize> = Vec::new();
        for i in order {
            if peaks.len() == 4 || score[i] <= 0.0 {
                break;
            }
            if peaks.iter().all(|&p| (f[p] - f[i]).abs() >= 0.5 * w) {
                peaks.push(i);
            }
        }
        for a in 0..peaks.len() {
            for b in a + 1..peaks.len() {
                let (lo, hi) = (f[peaks[a]].min(f[peaks[b]]), f[peaks[a]].max(f[peaks[b]]));
                let depth = 0.5 * (baseline - spectrum.contrast[peaks[a]] + baseline - spectrum.contrast[peaks[b]]);
                out.push(EsrParams { f_minus: lo, f_plus: hi, fwhm: w, contrast: depth.max(1e-4), baseline });
            }
        }
    }
    out
}

/// Weighted Lorentzian-pair fit of a spectrum.
///
/// The two dips share width and depth and sit on a flat baseline. Several
/// starting points are tried and the lowest χ² optimum is kept. Parameter
/// sigmas come from the curvature of χ² at the optimum.
pub fn fit_esr(spectrum: &EsrSpectrum) -> Result<EsrFit> {
    spectrum.validate()?;
    let baseline = median(&mut spectrum.contrast.clone());
    let mut guesses: Vec<EsrParams> = initial_guess(spectrum).into_iter().collect();
    guesses.extend(matched_filter_guesses(spectrum, baseline));
    if guesses.is_empty() {
        return Err(Error::UnresolvedSpectrum("no dip found".into()));
    }

    let n = spectrum.frequencies.len();
    let center = 0.5 * (spectrum.frequencies[0] + spectrum.frequencies[n - 1]);
    let mhz = 1e6;
    let min_pos_sigma = spectrum.contrast_sigma.iter().copied().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    let inv_sigma = spectrum
        .contrast_sigma
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s } else if min_pos_sigma.is_finite() { 1.0 / min_pos_sigma } else { 1.0 })
        .collect();
    let problem = EsrProblem {
        x_mhz: spectrum.frequencies.iter().map(|f| (f - center) / mhz).collect(),
        y: &spectrum.contrast,
        inv_sigma,
    };
    let mut best: Option<crate::lsq::LmSolution> = None;
    let mut last_err = None;
    for guess in &guesses {
        let start = [
            (guess.f_minus - center) / mhz,
            (guess.f_plus - center) / mhz,
            guess.fwhm / mhz,
            guess.contrast,
            guess.baseline,
        ];
        match levenberg_marquardt(&problem, &start, &LmOptions::default()) {
            Ok(sol) => {
                // A dip pair carrying most of its weight outside the grid
                // is not a usable optimum.
                let x0 = problem.x_mhz[0].min(problem.x_mhz[n - 1]);
                let x1 = problem.x_mhz[0].max(problem.x_mhz[n - 1]);
                let inside = [sol.params[0], sol.params[1]].iter().all(|&x| x >= x0 && x <= x1);
                let better = best.as_ref().is_none_or(|b| sol.chi2 < b.chi2);
                if inside && sol.params[3] > 0.0 && better {
                    best = Some(sol);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let sol = match (best, last_err) {
        (Some(sol), _) => sol,
        (None, Some(e)) => return Err(e),
        (None, None) => return Err(Error::UnresolvedSpectrum("no fit with positive dip depth inside the grid".into())),
    };
    let p = &sol.params;

    let (mut i_lo, mut i_hi) = (0, 1);
    if p[0] > p[1] {
        std::mem::swap(&mut i_lo, &mut i_hi);
    }
    let params = EsrParams {
        f_minus: center + p[i_lo] * mhz,
        f_plus: center + p[i_hi] * mhz,
        fwhm: p[2].abs() * mhz,
        contrast: p[3],
        baseline: p[4],
    };
    if !(params.contrast > 0.0) {
        return Err(Error::UnresolvedSpectrum(format!("fitted dip depth {:.3e} is not positive", params.contrast)));
    }
    if params.splitting() < 0.25 * params.fwhm {
        return Err(Error::UnresolvedSpectrum(format!(
            "splitting {:.3} MHz below a quarter linewidth ({:.3} MHz)",
            params.splitting() / mhz,
            params.fwhm / mhz
        )));
    }
    let Some(cov) = sol.covariance.as_ref() else {
        return Err(Error::UnresolvedSpectrum("singular fit covariance".into()));
    };
    let sd = |j: usize| cov[(j, j)].max(0.0).sqrt();
    let sigmas = EsrParams {
        f_minus: sd(i_lo) * mhz,
        f_plus: sd(i_hi) * mhz,
        fwhm: sd(2) * mhz,
        contrast: sd(3),
        baseline: sd(4),
    };
    let split_var = cov[(0, 0)] + cov[(1, 1)] - 2.0 * cov[(0, 1)];
    Ok(EsrFit {
        params,
        sigmas,
        splitting_sigma: split_var.max(0.0).sqrt() * mhz,
        residual_norm: sol.chi2.sqrt(),
        degrees_of_freedom: n.saturating_sub(5),
    })
}

/// Shot-noise-limited field sensitivity `0.77·(h/(g·µB))·Δν/(C·√R)` in T/√Hz.
pub fn sensitivity(contrast: f64, fwhm_hz: f64, count_rate_cps: f64) -> Result<f64> {
    if !(contrast > 0.0 && fwhm_hz > 0.0 && count_rate_cps > 0.0) {
        return Err(Error::domain(format!(
            "sensitivity needs positive contrast, linewidth and count rate (got C = {contrast}, Δν = {fwhm_hz}, R = {count_rate_cps})"
        )));
    }
    Ok(LORENTZIAN_SENSITIVITY_FACTOR * fwhm_hz / (gyromagnetic_ratio() * contrast * count_rate_cps.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn nominal_params(splitting: f64) -> EsrParams {
        EsrParams {
            f_minus: 2.870e9 - 0.5 * splitting,
            f_plus: 2.870e9 + 0.5 * splitting,
            fwhm: 7.2e6,
            contrast: 0.053,
            baseline: 0.0,
        }
    }

    #[test]
    fn lorentzian_shape() {
        assert_eq!(lorentzian(5.0, 5.0, 2.0), 1.0);
        assert!((lorentzian(6.0, 5.0, 2.0) - 0.5).abs() < 1e-15);
        assert!((lorentzian(4.0, 5.0, 2.0) - 0.5).abs() < 1e-15);
        assert_eq!(lorentzian(5.0 + 0.3, 5.0, 2.0), lorentzian(5.0 - 0.3, 5.0, 2.0));
    }

    #[test]
    fn contrast_model_limits() {
        let p = nominal_params(42.3e6);
        assert!(esr_contrast_model(1e14, &p).abs() < 1e-12);
        let far = EsrParams { f_plus: 1e12, ..p };
        assert!((esr_contrast_model(p.f_minus, &far) + 0.053).abs() < 1e-9);
        // Resolved pair: dips at 0.053 (plus a small tail of the partner).
        assert!(p.splitting() > 2.0 * p.fwhm);
        let depth = -esr_contrast_model(p.f_minus, &p);
        assert!(depth > 0.053 && depth < 0.053 * 1.03, "{depth}");
    }

    #[test]
    fn analytic_spectrum_equals_diluted_model() {
        let nv = NvSensor::default();
        let grid = OdmrConfig::default().grid();
        let b = splitting_to_field(42.3e6);
        let spectrum = simulate_lockin_spectrum(&grid, b, &nv, &LockinTiming::default(), 1.0, 0.0, None).unwrap();
        let (fm, fp) = zeeman_frequencies(b, nv.zero_field_splitting_hz).unwrap();
        let p = EsrParams { f_minus: fm, f_plus: fp, fwhm: nv.linewidth_fwhm_hz, contrast: nv.contrast, baseline: 0.0 };
        for (i, &f) in grid.iter().enumerate() {
            assert!((spectrum.contrast[i] - esr_contrast_model(f, &p)).abs() < 1e-14);
        }
        // Equal background and signal rates halve the dip.
        let diluted = simulate_lockin_spectrum(&grid, b, &nv, &LockinTiming::default(), 1.0, nv.count_rate_cps, None).unwrap();
        let imin = (0..grid.len()).min_by(|&a, &c| spectrum.contrast[a].total_cmp(&spectrum.contrast[c])).unwrap();
        assert!(rel(diluted.contrast[imin], 0.5 * spectrum.contrast[imin]) < 1e-12);
    }

    #[test]
    fn dwell_must_cover_ten_periods() {
        let nv = NvSensor::default();
        let grid = OdmrConfig::default().grid();
        let err = simulate_lockin_spectrum(&grid, 0.0, &nv, &LockinTiming::default(), 0.005, 0.0, None).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn zero_off_counts_are_reported() {
        let nv = NvSensor { count_rate_cps: 1e-9, ..NvSensor::default() };
        let grid = OdmrConfig::default().grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = simulate_lockin_spectrum(&grid, 0.0, &nv, &LockinTiming::default(), 1.0, 0.0, Some(&mut rng)).unwrap_err();
        assert!(matches!(err, Error::InsufficientCounts { index: 0 }));
    }

    #[test]
    fn per_point_sigma_matches_monte_carlo() {
        // 10³ repeated draws of one point against first-order propagation.
        let nv = NvSensor::default();
        let timing = LockinTiming::default();
        let grid = vec![2.85e9; 1];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let analytic =
            simulate_lockin_spectrum_varying(&grid, &[0.0], &[0.0], &nv, &timing, 1.0, None).unwrap().contrast_sigma[0];
        let draws: Vec<f64> = (0..1000)
            .map(|_| {
                simulate_lockin_spectrum_varying(&grid, &[0.0], &[0.0], &nv, &timing, 1.0, Some(&mut rng)).unwrap().contrast[0]
            })
            .collect();
        let (_, std, _) = crate::control::moments(&draws);
        assert!(rel(std, analytic) < 0.10, "mc {std} vs analytic {analytic}");
        // ≈ √(2/(R·dwell·duty)) for duty 1/2.
        assert!(rel(analytic, (2.0 / 22_500.0f64).sqrt()) < 0.01);
    }

    #[test]
    fn noiseless_fit_round_trip() {
        let p = EsrParams { f_minus: 2.8489e9, f_plus: 2.8912e9, fwhm: 7.2e6, contrast: 0.053, baseline: 0.0 };
        let grid = OdmrConfig::default().grid();
        let spectrum = EsrSpectrum {
            contrast: grid.iter().map(|&f| esr_contrast_model(f, &p)).collect(),
            contrast_sigma: vec![0.01; grid.len()],
            frequencies: grid,
            dwell_per_point: 1.0,
        };
        let fit = fit_esr(&spectrum).unwrap();
        assert!(rel(fit.params.f_minus, p.f_minus) < 1e-6);
        assert!(rel(fit.params.f_plus, p.f_plus) < 1e-6);
        assert!(rel(fit.params.fwhm, p.fwhm) < 1e-6);
        assert!(rel(fit.params.contrast, p.contrast) < 1e-6);
        assert!(fit.params.baseline.abs() < 1e-9);
        assert!(fit.residual_norm < 1e-6);
    }

    #[test]
    fn single_dip_is_unresolved() {
        let p = nominal_params(0.0);
        let grid = OdmrConfig::default().grid();
        let spectrum = EsrSpectrum {
            contrast: grid.iter().map(|&f| esr_contrast_model(f, &p)).collect(),
            contrast_sigma: vec![0.01; grid.len()],
            frequencies: grid,
            dwell_per_point: 1.0,
        };
        assert!(matches!(fit_esr(&spectrum), Err(Error::UnresolvedSpectrum(_))));
    }

    #[test]
    fn flat_spectrum_is_unresolved() {
        let grid = OdmrConfig::default().grid();
        let spectrum = EsrSpectrum {
            contrast: vec![0.0; grid.len()],
            contrast_sigma: vec![0.01; grid.len()],
            frequencies: grid,
            dwell_per_point: 1.0,
        };
        assert!(matches!(fit_esr(&spectrum), Err(Error::UnresolvedSpectrum(_))));
    }

    #[test]
    fn too_short_spectrum_rejected() {
        let spectrum = EsrSpectrum { frequencies: vec![1.0, 2.0], contrast: vec![0.0; 2], contrast_sigma: vec![0.0; 2], dwell_per_point: 1.0 };
        assert!(fit_esr(&spectrum).is_err());
    }

    #[test]
    fn splitting_conversions() {
        assert!((splitting_to_field(42.3e6) * 1e6 - 755.5).abs() < 0.1);
        assert_eq!(splitting_to_field(0.0), 0.0);
        let d = splitting_to_field(42.3e6) - splitting_to_field(34.2e6);
        assert!((d * 1e6 - 144.7).abs() < 0.05);
    }

    #[test]
    fn sensitivity_examples() {
        let eta = sensitivity(0.053, 7.2e6, 45_000.0).unwrap();
        assert!((eta * 1e6 - 17.6).abs() < 0.05, "{eta}");
        assert!(rel(eta * 1e6, 17.5) < 0.03);
        let eta2 = sensitivity(0.053, 7.2e6, 90_000.0).unwrap();
        assert!(rel(eta / eta2, 2f64.sqrt()) < 1e-14);
        let eta3 = sensitivity(0.106, 7.2e6, 45_000.0).unwrap();
        assert!(rel(eta / eta3, 2.0) < 1e-14);
        assert!(sensitivity(0.0, 7.2e6, 45_000.0).is_err());
        assert!(sensitivity(0.053, 7.2e6, 0.0).is_err());
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let nv = NvSensor::default();
        let grid = OdmrConfig::default().grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spectrum = simulate_lockin_spectrum(&grid, 7e-4, &nv, &LockinTiming::default(), 1.0, 0.0, Some(&mut rng)).unwrap();
        let back = EsrSpectrum::from_csv(&spectrum.to_csv()).unwrap();
        assert_eq!(back.frequencies.len(), spectrum.frequencies.len());
        for i in 0..grid.len() {
            assert!((back.contrast[i] - spectrum.contrast[i]).abs() <= 1e-9 * spectrum.contrast[i].abs().max(1e-12));
        }
    }

    #[test]
    fn fit_key_value_has_all_keys() {
        let nv = NvSensor::default();
        let grid = OdmrConfig::default().grid();
        let spectrum = simulate_lockin_spectrum(&grid, 7e-4, &nv, &LockinTiming::default(), 1.0, 0.0, None).unwrap();
        let kv = fit_esr(&spectrum).unwrap().to_key_value();
        for key in ["f_minus_Hz=", "f_plus_Hz=", "fwhm_Hz=", "contrast=", "baseline=", "sigma_f_minus_Hz=", "residual_norm="] {
            assert!(kv.contains(key), "{key}");
        }
    }
}
