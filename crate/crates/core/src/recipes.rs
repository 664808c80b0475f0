//! Named experiment recipes. Each one runs from a config alone, produces its
//! data files in memory, and is written out by [`write_outputs`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::control::{
    cross_track_rms, densify, path_length, run_hold, run_trajectory, settle_frames, square_spiral, ClosedLoop,
};
use crate::dynamics::equilibrium_height;
use crate::magnetostatics::splitting_to_field;
use crate::mapping::{acquire_map, acquire_spectrum_at, fit_dipole_map, predicted_delta_field, samples_to_csv, DipoleFitOptions};
use crate::odmr::{fit_esr, sensitivity, EsrFit, EsrSpectrum, OdmrConfig};
use crate::plot::{histogram, spectrum_plot, write_svg, Plot, Series};
use crate::{Error, Result, Vec2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Hold,
    Spiral,
    HeightCurve,
    Esr,
    Map,
    Sensitivity,
}

impl Recipe {
    pub const ALL: [Recipe; 6] =
        [Recipe::Hold, Recipe::Spiral, Recipe::HeightCurve, Recipe::Esr, Recipe::Map, Recipe::Sensitivity];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Hold => "hold",
            Recipe::Spiral => "spiral",
            Recipe::HeightCurve => "height-curve",
            Recipe::Esr => "esr",
            Recipe::Map => "map",
            Recipe::Sensitivity => "sensitivity",
        }
    }
}

/// A text file produced by a recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    fn new(name: &str, contents: String) -> Self {
        Self { name: name.into(), contents }
    }
}

#[derive(Debug, Clone)]
pub struct RecipeOutput {
    pub recipe: Recipe,
    /// Headline numbers as (name, formatted value).
    pub metrics: Vec<(String, String)>,
    pub data: Vec<Artifact>,
    pub plots: Vec<(String, Plot)>,
}

impl RecipeOutput {
    fn new(recipe: Recipe) -> Self {
        Self { recipe, metrics: Vec::new(), data: Vec::new(), plots: Vec::new() }
    }

    fn metric(&mut self, name: &str, value: String) {
        self.metrics.push((name.into(), value));
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.data.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub recipe: Recipe,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub metrics: Vec<(String, String)>,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "recipe: {} (seed {}, {:.2} s)", self.recipe.name(), self.seed, self.wall_clock_s)?;
        for (k, v) in &self.metrics {
            writeln!(f, "  {k}: {v}")?;
        }
        if !self.files.is_empty() {
            writeln!(f, "files:")?;
            for p in &self.files {
                writeln!(f, "  {}", p.display())?;
            }
        }
        Ok(())
    }
}

fn key_values(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn run_recipe(recipe: Recipe, cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    cfg.validate()?;
    match recipe {
        Recipe::Hold => hold(cfg),
        Recipe::Spiral => spiral(cfg),
        Recipe::HeightCurve => height_curve(cfg),
        Recipe::Esr => esr(cfg),
        Recipe::Map => map(cfg),
        Recipe::Sensitivity => {
            let nv = &cfg.world.nv;
            sensitivity_report(nv.contrast, nv.linewidth_fwhm_hz, nv.count_rate_cps, None)
        }
    }
}

fn hold(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let p = &cfg.recipes;
    let outcome = run_hold(&p.hold_target_m, p.hold_duration_s, &cfg.world, &cfg.controller, cfg.seed)?;
    let s = outcome.stats;
    let skip = settle_frames(&cfg.controller, &cfg.world.camera, outcome.log.len());
    let settled = &outcome.log.frames[skip..];
    let dx: Vec<f64> = settled.iter().map(|f| (f.measured_position.x - p.hold_target_m.x) * 1e9).collect();
    let dy: Vec<f64> = settled.iter().map(|f| (f.measured_position.y - p.hold_target_m.y) * 1e9).collect();

    let mut out = RecipeOutput::new(Recipe::Hold);
    out.metric("std_x", format!("{:.1} nm", s.std_x * 1e9));
    out.metric("std_y", format!("{:.1} nm", s.std_y * 1e9));
    out.metric("skewness", format!("{:.3} (x), {:.3} (y)", s.skewness_x, s.skewness_y));
    out.metric("frames after settling", s.samples.to_string());
    out.data.push(Artifact::new("hold_positions.csv", outcome.log.to_csv()));
    out.data.push(Artifact::new(
        "hold_stats.txt",
        key_values(&[
            ("std_x_nm", format!("{:.6}", s.std_x * 1e9)),
            ("std_y_nm", format!("{:.6}", s.std_y * 1e9)),
            ("mean_x_nm", format!("{:.6}", s.mean_x * 1e9)),
            ("mean_y_nm", format!("{:.6}", s.mean_y * 1e9)),
            ("skewness_x", format!("{:.6}", s.skewness_x)),
            ("skewness_y", format!("{:.6}", s.skewness_y)),
            ("settled_frames", s.samples.to_string()),
        ]),
    ));
    out.plots.push(("hold_histogram_x.svg".into(), histogram("Hold: x deviation", "x", "x − target (nm)", &dx)));
    out.plots.push(("hold_histogram_y.svg".into(), histogram("Hold: y deviation", "y", "y − target (nm)", &dy)));
    Ok(out)
}

fn spiral(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let p = &cfg.recipes;
    let corners = square_spiral(&p.spiral_center_m, p.spiral_pitch_m, p.spiral_legs);
    let waypoints = densify(&corners, p.spiral_waypoint_spacing_m);
    let log = run_trajectory(&waypoints, &cfg.trajectory, &cfg.world, &cfg.controller, cfg.seed)?;
    let start = cfg.world.particle.position_m.xy();
    let mut path = vec![start];
    path.extend_from_slice(&waypoints);
    let rms = cross_track_rms(&log, &path);
    let duration = log.frames.last().map_or(0.0, |f| f.time);

    let mut out = RecipeOutput::new(Recipe::Spiral);
    out.metric("cross-track rms", format!("{:.1} nm", rms * 1e9));
    out.metric("path length", format!("{:.2} µm", path_length(&path) * 1e6));
    out.metric("duration", format!("{duration:.1} s"));
    out.data.push(Artifact::new("spiral_trajectory.csv", log.to_csv()));
    let um = |v: &[Vec2], axis: usize| v.iter().map(|p| p[axis] * 1e6).collect::<Vec<_>>();
    let true_xy: Vec<Vec2> = log.frames.iter().map(|f| f.true_position.xy()).collect();
    let plot = Plot::new("Square spiral", "x (µm)", "y (µm)")
        .with(Series::line("target path", um(&path, 0), um(&path, 1)))
        .with(Series::line("particle", um(&true_xy, 0), um(&true_xy, 1)));
    out.plots.push(("spiral_path.svg".into(), plot));
    Ok(out)
}

fn height_curve(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let p = &cfg.recipes;
    let w = &cfg.world;
    let n = p.height_curve_points;
    let mut csv = String::from("current_mA,height_um,clearance_um\n");
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let current = p.height_curve_max_current_a * i as f64 / (n - 1) as f64;
        let h = equilibrium_height(current, &w.fluid, &w.coil, &w.particle)?;
        csv.push_str(&format!("{:.3},{:.6},{:.6}\n", current * 1e3, h * 1e6, (h - w.particle.radius_m) * 1e6));
        xs.push(current * 1e3);
        ys.push(h * 1e6);
    }
    let mut out = RecipeOutput::new(Recipe::HeightCurve);
    out.metric(
        &format!("height at {:.1} mA", w.coil.current_a * 1e3),
        format!("{:.3} µm", w.equilibrium_height()? * 1e6),
    );
    out.data.push(Artifact::new("height_curve.csv", csv));
    let plot = Plot::new("Equilibrium height vs coil current", "coil current (mA)", "particle center height (µm)")
        .with(Series::line("equilibrium", xs.clone(), ys.clone()))
        .with(Series::markers("grid", xs, ys));
    out.plots.push(("height_curve.svg".into(), plot));
    Ok(out)
}

fn fit_report(fit: &EsrFit) -> String {
    let b = splitting_to_field(fit.splitting());
    let mut s = fit.to_key_value();
    s.push_str(&format!("splitting_Hz={:.3}\nb_parallel_uT={:.6}\n", fit.splitting(), b * 1e6));
    s
}

fn esr(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let w = &cfg.world;
    let target = cfg.recipes.esr_offset_m;
    let z = w.equilibrium_height()?;
    let start = Vec3::new(w.particle.position_m.x, w.particle.position_m.y, z);
    let mut cl = ClosedLoop::with_start(w, &cfg.controller, cfg.seed, start);
    cl.follow(&[target], &cfg.trajectory)?;
    let spectrum = acquire_spectrum_at(&mut cl, &target, z, &cfg.odmr)?;
    let fit = fit_esr(&spectrum)?;

    let mut out = RecipeOutput::new(Recipe::Esr);
    out.metric(
        "splitting",
        format!("{:.3} ± {:.3} MHz", fit.splitting() / 1e6, fit.splitting_sigma / 1e6),
    );
    out.metric("projected field", format!("{:.1} µT", splitting_to_field(fit.splitting()) * 1e6));
    out.metric("linewidth", format!("{:.2} MHz", fit.params.fwhm / 1e6));
    out.metric("contrast", format!("{:.4}", fit.params.contrast));
    out.data.push(Artifact::new("esr_spectrum.csv", spectrum.to_csv()));
    out.data.push(Artifact::new("esr_fit.txt", fit_report(&fit)));
    let title = format!("ESR at offset ({:.2}, {:.2}) µm", target.x * 1e6, target.y * 1e6);
    out.plots.push(("esr_spectrum.svg".into(), spectrum_plot(&title, &spectrum, Some(&fit))));
    Ok(out)
}

fn map(cfg: &ExperimentConfig) -> Result<RecipeOutput> {
    let odmr = OdmrConfig { dwell_per_point_s: cfg.recipes.map_dwell_per_point_s, ..cfg.odmr.clone() };
    odmr.validate("recipes.map_dwell_per_point_s")?;
    let plan = &cfg.scan;
    let acq = acquire_map(&cfg.world, plan, &cfg.controller, &cfg.trajectory, &odmr, cfg.seed)?;
    let z0 = plan.particle_height_m;
    let opts = DipoleFitOptions {
        particle_radius_m: cfg.world.particle.radius_m,
        reference_offset_m: Some(plan.reference_offset_m),
        fixed_azimuth_rad: None,
    };

    let mut out = RecipeOutput::new(Recipe::Map);
    out.data.push(Artifact::new("map_samples.csv", samples_to_csv(&acq.samples)));
    out.data.push(Artifact::new("map_trajectory.csv", acq.log.to_csv()));
    out.data.push(Artifact::new("map_reference_fit.txt", fit_report(&acq.reference_fit)));
    let excluded = acq.samples.iter().filter(|s| !s.is_usable()).count();
    out.metric("samples", format!("{} ({} excluded)", acq.samples.len(), excluded));
    let fit = fit_dipole_map(&acq.samples, z0, &opts)?;
    out.data.push(Artifact::new("map_fit.txt", fit.to_key_value()));
    out.metric("moment", format!("{:.4e} ± {:.2e} A·m²", fit.moment_am2, fit.sigma_m));
    out.metric("nv axis", format!("({:.4}, {:.4}, {:.4})", fit.beta.x, fit.beta.y, fit.beta.z));
    out.metric(
        "axis sigmas",
        format!("θ {:.2}°, φ {:.2}°", fit.sigma_theta_rad.to_degrees(), fit.sigma_phi_rad.to_degrees()),
    );
    out.metric("residual norm", format!("{:.3} ({} dof)", fit.residual_norm, fit.degrees_of_freedom));

    // Measured points against the fitted model along each scan direction.
    let model = |r: &Vec2| {
        predicted_delta_field(r, z0, fit.moment_am2, &fit.beta)
            - predicted_delta_field(&plan.reference_offset_m, z0, fit.moment_am2, &fit.beta)
    };
    let mut directions: Vec<f64> = Vec::new();
    for s in &acq.samples {
        let ang = s.offset_m.y.atan2(s.offset_m.x).to_degrees().round();
        if !directions.contains(&ang) {
            directions.push(ang);
        }
    }
    let mut plot = Plot::new("Field map: measured vs fitted dipole", "distance from NV (µm)", "ΔB (µT)");
    let r_max = acq.samples.iter().map(|s| s.offset_m.norm()).fold(0.0, f64::max);
    for ang in directions.iter().take(4) {
        let dir = Vec2::new(ang.to_radians().cos(), ang.to_radians().sin());
        let group: Vec<_> = acq
            .samples
            .iter()
            .filter(|s| s.is_usable() && s.offset_m.y.atan2(s.offset_m.x).to_degrees().round() == *ang)
            .collect();
        let rs: Vec<f64> = (0..=200).map(|i| r_max * i as f64 / 200.0).collect();
        plot = plot
            .with(
                Series::markers(
                    format!("measured, {ang:.0}°"),
                    group.iter().map(|s| s.offset_m.norm() * 1e6).collect(),
                    group.iter().map(|s| s.delta_b_t * 1e6).collect(),
                )
                .with_errors(group.iter().map(|s| s.sigma_t * 1e6).collect()),
            )
            .with(Series::line(
                format!("model, {ang:.0}°"),
                rs.iter().map(|r| r * 1e6).collect(),
                rs.iter().map(|r| model(&(dir * *r)) * 1e6).collect(),
            ));
    }
    out.plots.push(("map_measured_vs_model.svg".into(), plot));
    Ok(out)
}

/// Sensitivity from explicit inputs; `spectrum` switches to fitted contrast
/// and linewidth.
pub fn sensitivity_report(
    contrast: f64,
    fwhm_hz: f64,
    count_rate_cps: f64,
    spectrum: Option<&EsrSpectrum>,
) -> Result<RecipeOutput> {
    let (c, w, source) = match spectrum {
        Some(s) => {
            let fit = fit_esr(s)?;
            (fit.params.contrast, fit.params.fwhm, "fitted spectrum")
        }
        None => (contrast, fwhm_hz, "inputs"),
    };
    let eta = sensitivity(c, w, count_rate_cps)?;
    let mut out = RecipeOutput::new(Recipe::Sensitivity);
    out.metric("source", source.into());
    out.metric("contrast", format!("{c:.4}"));
    out.metric("linewidth", format!("{:.3} MHz", w / 1e6));
    out.metric("count rate", format!("{count_rate_cps:.0} counts/s"));
    out.metric("sensitivity", format!("{:.1} µT/√Hz", eta * 1e6));
    Ok(out)
}

/// `<base>/<recipe>-<seed>` with base from the config or `./out`.
pub fn default_output_dir(recipe: Recipe, cfg: &ExperimentConfig) -> PathBuf {
    let base = cfg.output_dir.as_deref().unwrap_or("./out");
    Path::new(base).join(format!("{}-{}", recipe.name(), cfg.seed))
}

/// Writes data files, then plots. Refuses to replace existing files unless
/// `force`; nothing is written in that case.
pub fn write_outputs(output: &RecipeOutput, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let names = output.data.iter().map(|a| a.name.as_str()).chain(output.plots.iter().map(|(n, _)| n.as_str()));
    let paths: Vec<PathBuf> = names.map(|n| dir.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Output(format!("{} already exists; pass --force to overwrite", p.display())));
        }
    }
    if paths.is_empty() {
        return Ok(paths);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::Output(format!("cannot create {}: {e}", dir.display())))?;
    for a in &output.data {
        let p = dir.join(&a.name);
        std::fs::write(&p, &a.contents).map_err(|e| Error::Output(format!("cannot write {}: {e}", p.display())))?;
    }
    for (name, plot) in &output.plots {
        write_svg(plot, &dir.join(name))?;
    }
    Ok(paths)
}

/// Runs a recipe and writes its files to `dir` (or the default location).
pub fn run(recipe: Recipe, cfg: &ExperimentConfig, dir: Option<&Path>, force: bool) -> Result<RunSummary> {
    let started = Instant::now();
    let output = run_recipe(recipe, cfg)?;
    let dir = dir.map_or_else(|| default_output_dir(recipe, cfg), Path::to_path_buf);
    let files = write_outputs(&output, &dir, force)?;
    Ok(RunSummary {
        recipe,
        seed: cfg.seed,
        wall_clock_s: started.elapsed().as_secs_f64(),
        metrics: output.metrics,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 4;
        cfg.recipes.hold_duration_s = 10.0;
        cfg.recipes.spiral_legs = 4;
        cfg.recipes.height_curve_points = 5;
        cfg.odmr.grid_points = 41;
        cfg.odmr.dwell_per_point_s = 0.5;
        cfg.recipes.map_dwell_per_point_s = 0.5;
        cfg.scan.offsets_m = [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (0.0, 1.5), (0.0, 3.0)]
            .iter()
            .map(|(x, y)| Vec2::new(x * 1e-6, y * 1e-6))
            .collect();
        cfg
    }

    #[test]
    fn recipes_are_deterministic() {
        let cfg = quick_config();
        for recipe in Recipe::ALL {
            let a = run_recipe(recipe, &cfg).unwrap();
            let b = run_recipe(recipe, &cfg).unwrap();
            assert_eq!(a.data, b.data, "{}", recipe.name());
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn height_curve_csv() {
        let out = run_recipe(Recipe::HeightCurve, &quick_config()).unwrap();
        let csv = &out.artifact("height_curve.csv").unwrap().contents;
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "current_mA,height_um,clearance_um");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0.000,"));
        assert!(lines[5].starts_with("100.000,"));
    }

    #[test]
    fn sensitivity_metric() {
        let out = sensitivity_report(0.053, 7.2e6, 45000.0, None).unwrap();
        assert!(out.metrics.iter().any(|(k, v)| k == "sensitivity" && v == "17.6 µT/√Hz"));
        assert!(out.data.is_empty());
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let mut cfg = quick_config();
        cfg.recipes.hold_duration_s = 0.0;
        let err = run_recipe(Recipe::Hold, &cfg).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn writes_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config();
        let target = dir.path().join("hold");
        let s = run(Recipe::Hold, &cfg, Some(&target), false).unwrap();
        assert_eq!(s.files.len(), 4);
        assert!(s.files.iter().all(|p| p.exists()));
        let before = std::fs::read(target.join("hold_positions.csv")).unwrap();
        let err = run(Recipe::Hold, &cfg, Some(&target), false).unwrap_err();
        assert!(matches!(err, Error::Output(_)));
        run(Recipe::Hold, &cfg, Some(&target), true).unwrap();
        assert_eq!(std::fs::read(target.join("hold_positions.csv")).unwrap(), before);
        let text = s.to_string();
        assert!(text.contains("std_x") && text.contains("hold_positions.csv"));
    }

    #[test]
    fn default_directory_layout() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        assert_eq!(default_output_dir(Recipe::Map, &cfg), Path::new("./out/map-7"));
        cfg.output_dir = Some("runs".into());
        assert_eq!(default_output_dir(Recipe::HeightCurve, &cfg), Path::new("runs/height-curve-7"));
    }
}
