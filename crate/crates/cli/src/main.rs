use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nvf_core::config::ExperimentConfig;
use nvf_core::odmr::EsrSpectrum;
use nvf_core::recipes::{self, Recipe};
use nvf_core::{validation, Vec2};

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `./out/<recipe>-<seed>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Coil current in mA.
    #[arg(long, global = true)]
    current_ma: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hold the particle at a fixed target and report the position spread.
    Hold {
        /// Hold duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Hold target as x,y in µm.
        #[arg(long, value_parser = parse_offset_um)]
        offset_um: Option<Vec2>,
    },
    /// Steer the particle along a square spiral.
    Spiral,
    /// Equilibrium height against coil current.
    HeightCurve,
    /// ESR spectrum with the particle at an offset from the NV.
    Esr {
        /// Particle offset as x,y in µm.
        #[arg(long, value_parser = parse_offset_um)]
        offset_um: Option<Vec2>,
        /// Dwell per frequency point in seconds.
        #[arg(long)]
        dwell_s: Option<f64>,
    },
    /// Field map and dipole fit.
    Map {
        /// Dwell per frequency point in seconds.
        #[arg(long)]
        dwell_s: Option<f64>,
    },
    /// Shot-noise limited field sensitivity.
    Sensitivity {
        #[arg(long)]
        contrast: Option<f64>,
        #[arg(long)]
        fwhm_mhz: Option<f64>,
        /// Count rate in counts/s.
        #[arg(long)]
        rate: Option<f64>,
        /// Spectrum CSV to take contrast and linewidth from.
        #[arg(long)]
        spectrum: Option<PathBuf>,
    },
    /// Run the acceptance checks.
    Selftest,
}

/// Simulated NV magnetometry of a flow-controlled microparticle.
#[derive(Parser, Debug)]
#[command(name = "nvf", version)]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn parse_offset_um(s: &str) -> std::result::Result<Vec2, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [x, y] = parts.as_slice() else {
        return Err(format!("expected x,y in µm, got `{s}`"));
    };
    let x: f64 = x.parse().map_err(|e| format!("bad x `{x}`: {e}"))?;
    let y: f64 = y.parse().map_err(|e| format!("bad y `{y}`: {e}"))?;
    Ok(Vec2::new(x * 1e-6, y * 1e-6))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(ma) = common.current_ma {
        cfg.world.coil.current_a = ma * 1e-3;
    }
    Ok(cfg)
}

/// Half a unit in the last significant digit of `v` as written.
fn half_last_digit(v: f64) -> f64 {
    let text = format!("{}", v.abs());
    match text.split_once('.') {
        Some((_, frac)) => 0.5 * 10f64.powi(-(frac.len() as i32)),
        None => {
            let zeros = text.chars().rev().take_while(|&c| c == '0').count();
            0.5 * 10f64.powi(zeros as i32)
        }
    }
}

fn sensitivity(cfg: &ExperimentConfig, spectrum: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let nv = &cfg.world.nv;
    let spectrum = match spectrum {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(EsrSpectrum::from_csv(&text)?)
        }
        None => None,
    };
    let report = recipes::sensitivity_report(nv.contrast, nv.linewidth_fwhm_hz, nv.count_rate_cps, spectrum.as_ref())?;
    let dir = out.map_or_else(|| recipes::default_output_dir(Recipe::Sensitivity, cfg), Path::to_path_buf);
    recipes::write_outputs(&report, &dir, false)?;
    println!("recipe: sensitivity");
    for (k, v) in &report.metrics {
        println!("  {k}: {v}");
    }
    if spectrum.is_none() {
        let eta = nvf_core::odmr::sensitivity(nv.contrast, nv.linewidth_fwhm_hz, nv.count_rate_cps)?;
        let rel = half_last_digit(nv.contrast) / nv.contrast
            + half_last_digit(nv.linewidth_fwhm_hz / 1e6) / (nv.linewidth_fwhm_hz / 1e6)
            + 0.5 * half_last_digit(nv.count_rate_cps) / nv.count_rate_cps;
        println!(
            "  note: inputs rounded to their last digit move η by up to ±{:.1} µT/√Hz ({:.1}%)",
            eta * rel * 1e6,
            rel * 100.0
        );
    }
    Ok(())
}

fn selftest() -> bool {
    let outcomes = validation::run_all();
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("selftest: {} passed, {failed} failed", outcomes.len() - failed);
    failed == 0
}

fn run(top: Top) -> Result<ExitCode> {
    let common = &top.common;
    let mut cfg = load_config(common)?;
    let recipe = match top.command {
        Command::Selftest => return Ok(if selftest() { ExitCode::SUCCESS } else { ExitCode::from(2) }),
        Command::Sensitivity { contrast, fwhm_mhz, rate, spectrum } => {
            let nv = &mut cfg.world.nv;
            nv.contrast = contrast.unwrap_or(nv.contrast);
            nv.linewidth_fwhm_hz = fwhm_mhz.map_or(nv.linewidth_fwhm_hz, |f| f * 1e6);
            nv.count_rate_cps = rate.unwrap_or(nv.count_rate_cps);
            cfg.validate()?;
            sensitivity(&cfg, spectrum.as_deref(), common.out.as_deref())?;
            return Ok(ExitCode::SUCCESS);
        }
        Command::Hold { duration, offset_um } => {
            cfg.recipes.hold_duration_s = duration.unwrap_or(cfg.recipes.hold_duration_s);
            cfg.recipes.hold_target_m = offset_um.unwrap_or(cfg.recipes.hold_target_m);
            Recipe::Hold
        }
        Command::Spiral => Recipe::Spiral,
        Command::HeightCurve => Recipe::HeightCurve,
        Command::Esr { offset_um, dwell_s } => {
            cfg.recipes.esr_offset_m = offset_um.unwrap_or(cfg.recipes.esr_offset_m);
            cfg.odmr.dwell_per_point_s = dwell_s.unwrap_or(cfg.odmr.dwell_per_point_s);
            Recipe::Esr
        }
        Command::Map { dwell_s } => {
            cfg.recipes.map_dwell_per_point_s = dwell_s.unwrap_or(cfg.recipes.map_dwell_per_point_s);
            Recipe::Map
        }
    };
    log::info!("running {} with seed {}", recipe.name(), cfg.seed);
    let summary = recipes::run(recipe, &cfg, common.out.as_deref(), common.force)?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NVF_LOG", "warn")).init();
    let top = match Top::try_parse() {
        Ok(top) => top,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(top) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<nvf_core::Error>() {
                Some(e) if e.is_validation() => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
