//! The simulated apparatus: fluid, coil, bead, NV probe, camera and electrodes.

use serde::{Deserialize, Serialize};

use crate::control::{CameraModel, ElectrodeActuator};
use crate::dynamics::{self, FluidEnvironment, Kinetics};
use crate::magnetostatics::{check_non_negative, check_positive, dipole_field, CoilMagnet, MagneticParticle, NvSensor};
use crate::{Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceWorld {
    pub fluid: FluidEnvironment,
    pub coil: CoilMagnet,
    pub particle: MagneticParticle,
    pub nv: NvSensor,
    pub camera: CameraModel,
    pub actuator: ElectrodeActuator,
    /// Brownian motion on/off.
    pub thermal_noise: bool,
    /// Euler–Maruyama step (s).
    pub integrator_dt_s: f64,
    /// White-light scatter reaching the NV detector is `k / (r² + z²)` with
    /// `k` in counts/s·m² and r, z the bead offset from the NV.
    pub scatter_coefficient_cps_m2: f64,
    /// Effective moment (A·m²) of the bead's stray field at the NV. The
    /// vertical force uses `particle.moment_am2`.
    pub stray_moment_am2: f64,
}

impl Default for DeviceWorld {
    fn default() -> Self {
        Self {
            fluid: FluidEnvironment::default(),
            coil: CoilMagnet::default(),
            particle: MagneticParticle::default(),
            nv: NvSensor::default(),
            camera: CameraModel::default(),
            actuator: ElectrodeActuator::default(),
            thermal_noise: true,
            integrator_dt_s: 1e-3,
            scatter_coefficient_cps_m2: 4.5e-8,
            stray_moment_am2: 1e-14,
        }
    }
}

impl DeviceWorld {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        self.fluid.validate(&format!("{prefix}.fluid"))?;
        self.coil.validate(&format!("{prefix}.coil"))?;
        self.particle.validate(&format!("{prefix}.particle"))?;
        self.nv.validate(&format!("{prefix}.nv"))?;
        self.camera.validate(&format!("{prefix}.camera"))?;
        self.actuator.validate(&format!("{prefix}.actuator"))?;
        check_positive(self.integrator_dt_s, &format!("{prefix}.integrator_dt_s"))?;
        if self.integrator_dt_s > self.camera.frame_period() {
            return Err(crate::Error::config(
                format!("{prefix}.integrator_dt_s"),
                "must not exceed the camera frame period",
            ));
        }
        check_non_negative(self.scatter_coefficient_cps_m2, &format!("{prefix}.scatter_coefficient_cps_m2"))?;
        check_non_negative(self.stray_moment_am2, &format!("{prefix}.stray_moment_am2"))?;
        if 2.0 * self.particle.radius_m >= self.fluid.channel_height_m {
            return Err(crate::Error::config(
                format!("{prefix}.particle.radius_m"),
                "particle does not fit in the channel",
            ));
        }
        Ok(())
    }

    pub fn kinetics(&self) -> Kinetics {
        Kinetics::new(&self.fluid, &self.particle, self.thermal_noise)
    }

    pub fn vertical_force(&self, z: f64) -> f64 {
        dynamics::vertical_force(z, &self.fluid, &self.coil, &self.particle)
    }

    pub fn equilibrium_height(&self) -> Result<f64> {
        dynamics::equilibrium_height(self.coil.current_a, &self.fluid, &self.coil, &self.particle)
    }

    /// Stray-field moment: pinned to +z by the coil field when the coil is
    /// energized, otherwise along the configured axis.
    pub fn particle_moment(&self) -> Vec3 {
        if self.coil.current_a > 0.0 {
            Vec3::z() * self.stray_moment_am2
        } else {
            self.particle.moment_axis * self.stray_moment_am2
        }
    }

    /// Total field (coil + bead dipole) at the NV for a bead centered at `particle_pos`.
    pub fn field_at_nv(&self, particle_pos: &Vec3) -> Result<Vec3> {
        let nv = self.nv.position_m;
        let coil = Vec3::z() * self.coil.axial_field(nv.z);
        let moment = self.particle_moment();
        if moment == Vec3::zeros() {
            return Ok(coil);
        }
        Ok(coil + dipole_field(&moment, &(nv - particle_pos))?)
    }

    /// Scatter background (counts/s) at the NV detector for a bead at `particle_pos`.
    pub fn scatter_background(&self, particle_pos: &Vec3) -> f64 {
        let d2 = (particle_pos - self.nv.position_m).norm_squared();
        if self.scatter_coefficient_cps_m2 == 0.0 {
            return 0.0;
        }
        self.scatter_coefficient_cps_m2 / d2
    }
}
