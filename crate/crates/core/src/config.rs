//! JSON experiment configuration.
//!
//! Every section is optional and falls back to the defaults; unknown keys are
//! rejected with the offending key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{ControllerConfig, TrajectoryRules};
use crate::magnetostatics::{check_non_negative, check_positive};
use crate::mapping::ScanPlan;
use crate::odmr::OdmrConfig;
use crate::world::DeviceWorld;
use crate::{Error, Result, Vec2};

/// Per-recipe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeParams {
    pub hold_duration_s: f64,
    pub hold_target_m: Vec2,
    pub spiral_center_m: Vec2,
    pub spiral_pitch_m: f64,
    pub spiral_legs: usize,
    /// Spacing of the densified waypoint list along the spiral.
    pub spiral_waypoint_spacing_m: f64,
    pub height_curve_max_current_a: f64,
    pub height_curve_points: usize,
    pub esr_offset_m: Vec2,
    /// Dwell per frequency point for field maps (overrides `odmr`).
    pub map_dwell_per_point_s: f64,
}

impl Default for RecipeParams {
    fn default() -> Self {
        Self {
            hold_duration_s: 60.0,
            hold_target_m: Vec2::zeros(),
            spiral_center_m: Vec2::zeros(),
            spiral_pitch_m: 2e-6,
            spiral_legs: 12,
            spiral_waypoint_spacing_m: 0.5e-6,
            height_curve_max_current_a: 0.1,
            height_curve_points: 20,
            esr_offset_m: Vec2::new(1.5e-6, 0.0),
            map_dwell_per_point_s: 3.0,
        }
    }
}

impl RecipeParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.hold_duration_s, &format!("{prefix}.hold_duration_s"))?;
        check_positive(self.spiral_pitch_m, &format!("{prefix}.spiral_pitch_m"))?;
        if self.spiral_legs == 0 {
            return Err(Error::config(format!("{prefix}.spiral_legs"), "must be at least 1"));
        }
        check_positive(self.spiral_waypoint_spacing_m, &format!("{prefix}.spiral_waypoint_spacing_m"))?;
        check_non_negative(self.height_curve_max_current_a, &format!("{prefix}.height_curve_max_current_a"))?;
        if self.height_curve_points < 2 {
            return Err(Error::config(format!("{prefix}.height_curve_points"), "need at least 2 currents"));
        }
        check_positive(self.map_dwell_per_point_s, &format!("{prefix}.map_dwell_per_point_s"))?;
        for (key, v) in [("hold_target_m", self.hold_target_m), ("spiral_center_m", self.spiral_center_m), ("esr_offset_m", self.esr_offset_m)] {
            if !(v.x.is_finite() && v.y.is_finite()) {
                return Err(Error::config(format!("{prefix}.{key}"), "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: DeviceWorld,
    pub controller: ControllerConfig,
    pub trajectory: TrajectoryRules,
    pub odmr: OdmrConfig,
    pub scan: ScanPlan,
    pub recipes: RecipeParams,
    pub seed: u64,
    /// Base directory for outputs; `./out/<recipe>-<seed>/` when unset.
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: DeviceWorld::default(),
            controller: ControllerConfig::default(),
            trajectory: TrajectoryRules::default(),
            odmr: OdmrConfig::default(),
            scan: ScanPlan::default(),
            recipes: RecipeParams::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON without validating values.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "<root>".to_string() } else { key };
            Error::config(key, e.into_inner().to_string())
        })
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate("world")?;
        self.controller.validate("controller")?;
        self.trajectory.validate("trajectory")?;
        self.odmr.validate("odmr")?;
        self.scan.validate("scan")?;
        self.recipes.validate("recipes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = u64::MAX - 3;
        cfg.world.coil.current_a = 0.062;
        cfg.output_dir = Some("runs/a".into());
        cfg.scan.offsets_m.push(Vec2::new(-1.25e-6, 3.5e-6));
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"world": {"coil": {"current_a": 0.08}}, "seed": 9}"#).unwrap();
        assert_eq!(cfg.world.coil.current_a, 0.08);
        assert_eq!(cfg.world.coil.turns, 150);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = ExperimentConfig::from_json(r#"{"world": {"coil": {"curent_a": 0.08}}}"#).unwrap_err();
        assert_eq!(key_of(err), "world.coil.curent_a");
        let err = ExperimentConfig::from_json(r#"{"odmr": {"timing": {"duty": "half"}}}"#).unwrap_err();
        assert_eq!(key_of(err), "odmr.timing.duty");
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cases: [(&str, &str); 6] = [
            (r#"{"world": {"fluid": {"viscosity_pa_s": -1}}}"#, "world.fluid.viscosity_pa_s"),
            (r#"{"world": {"nv": {"axis": [0, 0, 2]}}}"#, "world.nv.axis"),
            (r#"{"odmr": {"timing": {"duty": 1.0}}}"#, "odmr.timing.duty"),
            (r#"{"scan": {"reference_offset_m": [1e-6, 0]}}"#, "scan.reference_offset_m"),
            (r#"{"recipes": {"hold_duration_s": 0}}"#, "recipes.hold_duration_s"),
            (r#"{"controller": {"max_speed_m_per_s": 0}}"#, "controller.max_speed_m_per_s"),
        ];
        for (json, key) in cases {
            let cfg = ExperimentConfig::from_json(json).unwrap();
            assert_eq!(key_of(cfg.validate().unwrap_err()), key, "{json}");
        }
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 42}"#).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap().seed, 42);
        std::fs::write(&path, r#"{"seed": -1}"#).unwrap();
        assert_eq!(key_of(ExperimentConfig::load(&path).unwrap_err()), "seed");
        assert!(ExperimentConfig::load(&dir.path().join("missing.json")).unwrap_err().is_validation());
    }
}
