//! Field-map experiments and their dipole inversion.
//!
//! The observable at each scan offset is the reduction of the Zeeman
//! splitting relative to a far reference position, converted to a field:
//! `ΔB(r) = (Δf_ref − Δf(r)) / 2γ`. With the coil field along +z and the NV
//! axis gauge-fixed to `β_z ≥ 0`, the model for a vertically magnetized bead
//! at height z₀ is `ΔB(r) = −β·B_dip(m·ẑ, NV − bead)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::gyromagnetic_ratio;
use crate::control::{ClosedLoop, ControllerConfig, TrajectoryLog, TrajectoryRules};
use crate::lsq::{levenberg_marquardt, LmOptions, Residuals};
use crate::magnetostatics::{check_positive, dipole_field, nv_projected_field};
use crate::odmr::{fit_esr, simulate_lockin_spectrum_varying, EsrFit, EsrSpectrum, OdmrConfig};
use crate::world::DeviceWorld;
use crate::{Error, Result, Vec2, Vec3};

/// Allowed mismatch between the planned bead height and the equilibrium height.
pub const HEIGHT_CHECK_TOLERANCE_M: f64 = 0.1e-6;
/// Minimum distance of the reference position from the NV.
pub const MIN_REFERENCE_DISTANCE_M: f64 = 5e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanPlan {
    /// Bead offsets from the NV in the plane (m).
    pub offsets_m: Vec<Vec2>,
    /// Bead center height above the glass (m).
    pub particle_height_m: f64,
    /// Far position used for the baseline splitting.
    pub reference_offset_m: Vec2,
}

impl Default for ScanPlan {
    /// Two orthogonal radial lines with seven radii each.
    fn default() -> Self {
        let radii_um = [1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 7.25];
        let mut offsets_m = Vec::new();
        for dir in [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)] {
            offsets_m.extend(radii_um.iter().map(|r| dir * (r / 1e6)));
        }
        Self { offsets_m, particle_height_m: 0.7e-6, reference_offset_m: Vec2::new(-20e-6, 0.0) }
    }
}

impl ScanPlan {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.particle_height_m, &format!("{prefix}.particle_height_m"))?;
        if !(self.reference_offset_m.norm() >= MIN_REFERENCE_DISTANCE_M) {
            return Err(Error::config(format!("{prefix}.reference_offset_m"), "must be at least 5 µm from the NV"));
        }
        if self.offsets_m.is_empty() {
            return Err(Error::config(format!("{prefix}.offsets_m"), "must not be empty"));
        }
        for (i, a) in self.offsets_m.iter().enumerate() {
            if !(a.x.is_finite() && a.y.is_finite()) {
                return Err(Error::config(format!("{prefix}.offsets_m[{i}]"), "must be finite"));
            }
            if self.offsets_m[..i].iter().any(|b| (a - b).norm() < 1e-12) {
                return Err(Error::config(format!("{prefix}.offsets_m[{i}]"), "duplicate offset"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleFlag {
    Ok,
    SteeringTimeout,
    Unresolved(String),
}

impl SampleFlag {
    pub fn label(&self) -> &'static str {
        match self {
            SampleFlag::Ok => "ok",
            SampleFlag::SteeringTimeout => "steering_timeout",
            SampleFlag::Unresolved(_) => "unresolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMapSample {
    pub offset_m: Vec2,
    /// Reduction of the projected field relative to the reference (T).
    pub delta_b_t: f64,
    /// Total one-sigma error of `delta_b_t`.
    pub sigma_t: f64,
    /// Part of `sigma_t` common to all samples through the shared reference.
    pub reference_sigma_t: f64,
    pub flag: SampleFlag,
}

impl FieldMapSample {
    pub fn is_usable(&self) -> bool {
        self.flag == SampleFlag::Ok && self.delta_b_t.is_finite() && self.sigma_t > 0.0
    }
}

pub const SAMPLES_CSV_HEADER: &str = "rx_um,ry_um,deltaB_uT,sigma_uT,flag";

pub fn samples_to_csv(samples: &[FieldMapSample]) -> String {
    let mut out = String::new();
    out.push_str(SAMPLES_CSV_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{}",
            s.offset_m.x * 1e6,
            s.offset_m.y * 1e6,
            s.delta_b_t * 1e6,
            s.sigma_t * 1e6,
            s.flag.label()
        );
    }
    out
}

/// Field reduction implied by a drop in splitting from `splitting_ref` to
/// `splitting_at_r` (both Hz).
pub fn delta_field_from_splittings(splitting_ref: f64, splitting_at_r: f64) -> f64 {
    (splitting_ref - splitting_at_r) / (2.0 * gyromagnetic_ratio())
}

/// Predicted splitting-derived field reduction for a bead of moment `m·ẑ`
/// centered at horizontal offset `r` and height `z0` above an NV with axis β.
pub fn predicted_delta_field(r: &Vec2, z0: f64, moment_am2: f64, beta: &Vec3) -> f64 {
    if moment_am2 == 0.0 {
        return 0.0;
    }
    let offset = Vec3::new(-r.x, -r.y, -z0);
    match dipole_field(&(Vec3::z() * moment_am2), &offset) {
        Ok(b) => -nv_projected_field(&b, beta),
        Err(_) => f64::NAN,
    }
}

/// Dense grid of [`predicted_delta_field`]; `grid[j][i]` is at `(xs[i], ys[j])`.
pub fn predicted_map_grid(moment_am2: f64, beta: &Vec3, z0: f64, xs: &[f64], ys: &[f64]) -> Vec<Vec<f64>> {
    ys.iter()
        .map(|&y| xs.iter().map(|&x| predicted_delta_field(&Vec2::new(x, y), z0, moment_am2, beta)).collect())
        .collect()
}

/// Everything recorded by [`acquire_map`].
#[derive(Debug, Clone)]
pub struct MapAcquisition {
    pub samples: Vec<FieldMapSample>,
    pub reference_fit: EsrFit,
    pub reference_spectrum: EsrSpectrum,
    /// Spectrum and fit for each scan offset (`None` where flagged).
    pub spectra: Vec<Option<(EsrSpectrum, EsrFit)>>,
    pub log: TrajectoryLog,
}

/// Holds the bead at `target` for one spectrum acquisition and synthesizes
/// the spectrum, each frequency point seeing the field averaged over the
/// camera frames of its dwell window.
pub fn acquire_spectrum_at(
    cl: &mut ClosedLoop<'_>,
    target: &Vec2,
    height: f64,
    odmr: &OdmrConfig,
) -> Result<EsrSpectrum> {
    let world = cl.world().clone();
    let grid = odmr.grid();
    let frames_per_point = ((odmr.dwell_per_point_s * world.camera.frame_rate_hz).round() as usize).max(1);
    let range = cl.hold(target, frames_per_point * grid.len())?;
    let frames = &cl.log().frames[range];
    let mut b_par = Vec::with_capacity(grid.len());
    let mut background = Vec::with_capacity(grid.len());
    for chunk in frames.chunks(frames_per_point) {
        let mut b_sum = 0.0;
        let mut bg_sum = 0.0;
        for f in chunk {
            // The bead rides at the equilibrium height; in-plane jitter is
            // taken from the simulated trajectory.
            let p = Vec3::new(f.true_position.x, f.true_position.y, height);
            b_sum += nv_projected_field(&world.field_at_nv(&p)?, &world.nv.axis);
            bg_sum += world.scatter_background(&p);
        }
        b_par.push(b_sum / chunk.len() as f64);
        background.push(bg_sum / chunk.len() as f64);
    }
    simulate_lockin_spectrum_varying(
        &grid,
        &b_par,
        &background,
        &world.nv,
        &odmr.timing,
        odmr.dwell_per_point_s,
        Some(cl.rng_mut()),
    )
}

/// Splitting sigma inflated by the reduced χ² when the spectrum scatters
/// more than photon noise alone (the bead jitters in a field gradient).
fn birge_scaled_sigma(fit: &EsrFit) -> f64 {
    let dof = fit.degrees_of_freedom.max(1) as f64;
    let ratio = (fit.residual_norm * fit.residual_norm / dof).sqrt();
    fit.splitting_sigma * ratio.max(1.0)
}

/// In the linear Zeeman regime the dip pair straddles the zero-field
/// splitting symmetrically; a fit that does not is a mis-assignment.
fn check_centered(fit: EsrFit, zero_field_splitting: f64) -> Result<EsrFit> {
    let center = 0.5 * (fit.params.f_minus + fit.params.f_plus);
    if (center - zero_field_splitting).abs() > 0.5 * fit.params.fwhm {
        return Err(Error::UnresolvedSpectrum(format!(
            "dip pair centered {:.2} MHz away from the zero-field splitting",
            (center - zero_field_splitting) / 1e6
        )));
    }
    Ok(fit)
}

/// Runs a field-mapping experiment on a simulated apparatus.
///
/// The bead is steered to the reference position and then to each scan
/// offset; at each stop it is held while a spectrum is acquired and fitted.
/// Offsets that cannot be reached or whose spectrum cannot be resolved are
/// kept in the output with a flag and no field value.
pub fn acquire_map(
    world: &DeviceWorld,
    plan: &ScanPlan,
    controller: &ControllerConfig,
    rules: &TrajectoryRules,
    odmr: &OdmrConfig,
    seed: u64,
) -> Result<MapAcquisition> {
    plan.validate("plan")?;
    odmr.validate("odmr")?;
    let z_eq = world.equilibrium_height()?;
    if (z_eq - plan.particle_height_m).abs() > HEIGHT_CHECK_TOLERANCE_M {
        return Err(Error::HeightMismatch { planned_um: plan.particle_height_m * 1e6, actual_um: z_eq * 1e6 });
    }
    let z0 = plan.particle_height_m;
    let start = Vec3::new(world.particle.position_m.x, world.particle.position_m.y, z_eq);
    let mut cl = ClosedLoop::with_start(world, controller, seed, start);

    cl.follow(&[plan.reference_offset_m], rules)?;
    let reference_spectrum = acquire_spectrum_at(&mut cl, &plan.reference_offset_m, z0, odmr)?;
    let reference_fit = check_centered(fit_esr(&reference_spectrum)?, world.nv.zero_field_splitting_hz)?;
    let two_gamma = 2.0 * gyromagnetic_ratio();

    let mut samples = Vec::with_capacity(plan.offsets_m.len());
    let mut spectra = Vec::with_capacity(plan.offsets_m.len());
    for (i, target) in plan.offsets_m.iter().enumerate() {
        let flagged = |flag| FieldMapSample {
            offset_m: *target,
            delta_b_t: f64::NAN,
            sigma_t: f64::NAN,
            reference_sigma_t: f64::NAN,
            flag,
        };
        match cl.follow(std::slice::from_ref(target), rules) {
            Ok(()) => {}
            Err(Error::WaypointTimeout { .. }) => {
                log::warn!("scan offset {i}: steering timeout, sample excluded");
                samples.push(flagged(SampleFlag::SteeringTimeout));
                spectra.push(None);
                continue;
            }
            Err(e) => return Err(e),
        }
        let spectrum = acquire_spectrum_at(&mut cl, target, z0, odmr)?;
        match fit_esr(&spectrum).and_then(|fit| check_centered(fit, world.nv.zero_field_splitting_hz)) {
            Ok(fit) => {
                let delta = delta_field_from_splittings(reference_fit.splitting(), fit.splitting());
                let sigma_ref = birge_scaled_sigma(&reference_fit) / two_gamma;
                let sigma = sigma_ref.hypot(birge_scaled_sigma(&fit) / two_gamma);
                samples.push(FieldMapSample {
                    offset_m: *target,
                    delta_b_t: delta,
                    sigma_t: sigma,
                    reference_sigma_t: sigma_ref,
                    flag: SampleFlag::Ok,
                });
                spectra.push(Some((spectrum, fit)));
            }
            Err(Error::UnresolvedSpectrum(reason)) | Err(Error::FitNotConverged { diagnostics: reason, .. }) => {
                log::warn!("scan offset {i}: {reason}; sample excluded");
                samples.push(flagged(SampleFlag::Unresolved(reason)));
                spectra.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MapAcquisition { samples, reference_fit, reference_spectrum, spectra, log: cl.into_log() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipoleFitOptions {
    /// Samples closer than this (3-D) to the bead center are refused.
    pub particle_radius_m: f64,
    /// When set, the model is referenced to this offset exactly as the data are.
    pub reference_offset_m: Option<Vec2>,
    /// Restrict β to the vertical plane at this azimuth (rad).
    pub fixed_azimuth_rad: Option<f64>,
}

impl Default for DipoleFitOptions {
    fn default() -> Self {
        Self { particle_radius_m: 0.5e-6, reference_offset_m: None, fixed_azimuth_rad: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipoleFitResult {
    pub moment_am2: f64,
    /// Unit NV axis with `β_z ≥ 0`.
    pub beta: Vec3,
    pub theta_rad: f64,
    pub phi_rad: f64,
    pub sigma_m: f64,
    pub sigma_theta_rad: f64,
    pub sigma_phi_rad: f64,
    /// √χ² of the weighted residuals.
    pub residual_norm: f64,
    pub degrees_of_freedom: usize,
    /// Whitened residuals of the usable samples; `(ΔB − model)/σ` when the
    /// sample errors are independent.
    pub normalized_residuals: Vec<f64>,
}

impl DipoleFitResult {
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "m_Am2={:.6e}", self.moment_am2);
        let _ = writeln!(out, "beta_x={:.9}", self.beta.x);
        let _ = writeln!(out, "beta_y={:.9}", self.beta.y);
        let _ = writeln!(out, "beta_z={:.9}", self.beta.z);
        let _ = writeln!(out, "sigma_m={:.6e}", self.sigma_m);
        let _ = writeln!(out, "sigma_theta_deg={:.6}", self.sigma_theta_rad.to_degrees());
        let _ = writeln!(out, "sigma_phi_deg={:.6}", self.sigma_phi_rad.to_degrees());
        let _ = writeln!(out, "residual_norm={:.6}", self.residual_norm);
        out
    }

    /// Angle between the fitted and a reference axis (rad).
    pub fn axis_error(&self, truth: &Vec3) -> f64 {
        self.beta.dot(&truth.normalize()).clamp(-1.0, 1.0).acos()
    }
}

fn beta_from_angles(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

struct DipoleProblem<'a> {
    samples: Vec<&'a FieldMapSample>,
    /// Cholesky factor of the sample error covariance.
    chol_lower: DMatrix<f64>,
    z0: f64,
    moment_scale: f64,
    reference: Option<Vec2>,
    fixed_azimuth: Option<f64>,
}

impl DipoleProblem<'_> {
    fn unpack(&self, p: &[f64]) -> (f64, Vec3) {
        let phi = self.fixed_azimuth.unwrap_or_else(|| p[2]);
        (p[0] * self.moment_scale, beta_from_angles(p[1], phi))
    }

    fn model(&self, r: &Vec2, m: f64, beta: &Vec3) -> f64 {
        let base = predicted_delta_field(r, self.z0, m, beta);
        match &self.reference {
            Some(ref_r) => base - predicted_delta_field(ref_r, self.z0, m, beta),
            None => base,
        }
    }
}

impl Residuals for DipoleProblem<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let (m, beta) = self.unpack(p);
        let diff = DVector::from_iterator(
            self.samples.len(),
            self.samples.iter().map(|s| s.delta_b_t - self.model(&s.offset_m, m, &beta)),
        );
        match self.chol_lower.solve_lower_triangular(&diff) {
            Some(w) => out.copy_from_slice(w.as_slice()),
            None => out.fill(f64::NAN),
        }
    }
}

/// Weighted least-squares fit of moment magnitude and NV axis to a field map.
///
/// The axis is parameterized by polar/azimuthal angles; the fit is started
/// from eight axis directions and three moment magnitudes spanning two
/// decades around a single-sample estimate, and the best optimum is kept.
pub fn fit_dipole_map(samples: &[FieldMapSample], z0: f64, opts: &DipoleFitOptions) -> Result<DipoleFitResult> {
    check_positive(z0, "z0")?;
    let usable: Vec<&FieldMapSample> = samples.iter().filter(|s| s.is_usable()).collect();
    let n_params = if opts.fixed_azimuth_rad.is_some() { 2 } else { 3 };
    if usable.len() < n_params + 1 {
        return Err(Error::DegenerateGeometry(format!(
            "{} usable samples, need at least {}",
            usable.len(),
            n_params + 1
        )));
    }
    let mut radii: Vec<f64> = usable.iter().map(|s| s.offset_m.norm()).collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if radii.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("samples span only {} distinct radii", radii.len())));
    }
    for s in &usable {
        let d = (s.offset_m.norm_squared() + z0 * z0).sqrt();
        if d < opts.particle_radius_m {
            return Err(Error::domain(format!(
                "sample at ({:.3}, {:.3}) µm is inside the particle radius; dipole model invalid",
                s.offset_m.x * 1e6,
                s.offset_m.y * 1e6
            )));
        }
    }

    // Moment scale from the most significant sample, assuming β = ẑ.
    let anchor = usable
        .iter()
        .filter(|s| predicted_delta_field(&s.offset_m, z0, 1.0, &Vec3::z()).abs() > 0.0)
        .max_by(|a, b| (a.delta_b_t / a.sigma_t).abs().total_cmp(&(b.delta_b_t / b.sigma_t).abs()))
        .ok_or_else(|| Error::DegenerateGeometry("no sample with a usable lever arm".into()))?;
    let unit = predicted_delta_field(&anchor.offset_m, z0, 1.0, &Vec3::z()).abs();
    let mut moment_scale = anchor.delta_b_t.abs() / unit;
    if !(moment_scale > 0.0) {
        moment_scale = 1e-14;
    }

    // Independent parts on the diagonal plus the rank-one shared reference term.
    let n = usable.len();
    let covariance = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (usable[i], usable[j]);
        let shared = a.reference_sigma_t.max(0.0).min(a.sigma_t) * b.reference_sigma_t.max(0.0).min(b.sigma_t);
        if i == j {
            a.sigma_t * a.sigma_t
        } else {
            shared
        }
    });
    let chol_lower = covariance
        .cholesky()
        .ok_or_else(|| Error::domain("sample covariance is not positive definite"))?
        .unpack();
    let problem = DipoleProblem {
        samples: usable.clone(),
        chol_lower,
        z0,
        moment_scale,
        reference: opts.reference_offset_m,
        fixed_azimuth: opts.fixed_azimuth_rad,
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    for m in [0.1, 1.0, 10.0] {
        match opts.fixed_azimuth_rad {
            Some(_) => {
                for theta_deg in [-60.0f64, -20.0, 20.0, 60.0] {
                    starts.push(vec![m, theta_deg.to_radians()]);
                }
            }
            None => {
                for theta_deg in [30.0f64, 70.0] {
                    for phi_deg in [45.0f64, 135.0, 225.0, 315.0] {
                        starts.push(vec![m, theta_deg.to_radians(), phi_deg.to_radians()]);
                    }
                }
            }
        }
    }

    let opts_lm = LmOptions { max_iterations: 300, ..LmOptions::default() };
    let solutions: Vec<_> = starts
        .par_iter()
        .map(|s| levenberg_marquardt(&problem, s, &opts_lm))
        .collect();
    let best = solutions
        .into_iter()
        .filter_map(|s| s.ok())
        .min_by(|a, b| a.chi2.total_cmp(&b.chi2))
        .ok_or_else(|| Error::FitNotConverged { iterations: opts_lm.max_iterations, diagnostics: "no start converged".into() })?;

    let Some(cov) = best.covariance.as_ref() else {
        return Err(Error::DegenerateGeometry("fit covariance is singular; parameters unidentifiable".into()));
    };
    let (mut moment, mut beta) = problem.unpack(&best.params);
    if beta.z < 0.0 {
        beta = -beta;
        moment = -moment;
    }
    let sd = |j: usize| cov[(j, j)].max(0.0).sqrt();
    let sigma_phi_rad = if opts.fixed_azimuth_rad.is_some() { 0.0 } else { sd(2) };

    // With every sample on one line through the NV, the axis component
    // normal to that line enters only through |β| = 1 and its sign is lost.
    if opts.fixed_azimuth_rad.is_none() {
        let dir = usable[0].offset_m.normalize();
        let collinear = usable.iter().all(|s| (s.offset_m.x * dir.y - s.offset_m.y * dir.x).abs() <= 1e-9 * s.offset_m.norm());
        let normal = Vec3::new(-dir.y, dir.x, 0.0);
        if collinear && beta.dot(&normal).abs() > 1e-3 {
            return Err(Error::DegenerateGeometry(
                "all samples lie on one ray; the sign of the out-of-line axis component is unidentifiable".into(),
            ));
        }
    }

    let mut normalized_residuals = vec![0.0; usable.len()];
    problem.residuals(&best.params, &mut normalized_residuals);
    let theta = beta.z.clamp(-1.0, 1.0).acos();
    let phi = beta.y.atan2(beta.x);
    Ok(DipoleFitResult {
        moment_am2: moment,
        beta,
        theta_rad: theta,
        phi_rad: phi,
        sigma_m: sd(0) * moment_scale,
        sigma_theta_rad: sd(1),
        sigma_phi_rad,
        residual_norm: best.chi2.sqrt(),
        degrees_of_freedom: usable.len() - n_params,
        normalized_residuals,
    })
}

/// Gauge-fixed copy of an axis (`β_z ≥ 0`) for comparing fits to truth.
pub fn gauge_fixed(beta: &Vec3) -> Vec3 {
    let b = beta.normalize();
    if b.z < 0.0 {
        -b
    } else {
        b
    }
}
