//! Magnetic field models: point dipole, coaxial coil stack, projection onto
//! the NV axis and the linear Zeeman transition frequencies.
//!
//! The particle is treated as a point dipole,
//!
//! ```text
//! B(r) = µ₀/4π · (3 r̂ (m·r̂) − m) / |r|³
//! ```
//!
//! which is also the exact exterior field of a uniformly magnetized sphere.

use serde::{Deserialize, Serialize};

use crate::constants::{gyromagnetic_ratio, MU0, MU0_OVER_4PI};
use crate::{Error, Result, Vec3};

/// Relative tolerance used when checking that a vector is a unit vector.
pub const UNIT_TOLERANCE: f64 = 1e-12;

/// Largest |B∥| for which the linear Zeeman model is trusted.
pub const LINEAR_ZEEMAN_LIMIT_T: f64 = 10e-3;

pub(crate) fn check_unit(v: &Vec3, key: &str) -> Result<()> {
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::config(key, format!("must be a unit vector (|v| = {n})")));
    }
    Ok(())
}

pub(crate) fn check_positive(value: f64, key: &str) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::config(key, format!("must be positive and finite (got {value})")));
    }
    Ok(())
}

pub(crate) fn check_non_negative(value: f64, key: &str) -> Result<()> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::config(key, format!("must be non-negative and finite (got {value})")));
    }
    Ok(())
}

/// The manipulated magnetic bead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagneticParticle {
    /// Center position in m; z is measured up from the bottom glass surface.
    pub position_m: Vec3,
    pub moment_am2: f64,
    /// Unit direction of the moment.
    pub moment_axis: Vec3,
    pub radius_m: f64,
}

impl MagneticParticle {
    pub fn moment(&self) -> Vec3 {
        self.moment_axis * self.moment_am2
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !self.position_m.iter().all(|c| c.is_finite()) {
            return Err(Error::config(format!("{prefix}.position_m"), "must be finite"));
        }
        check_non_negative(self.moment_am2, &format!("{prefix}.moment_am2"))?;
        check_unit(&self.moment_axis, &format!("{prefix}.moment_axis"))?;
        check_positive(self.radius_m, &format!("{prefix}.radius_m"))
    }
}

impl Default for MagneticParticle {
    /// Saturated maghemite sphere of radius 500 nm, moment along +z.
    fn default() -> Self {
        Self {
            position_m: Vec3::new(0.0, 0.0, 0.7e-6),
            moment_am2: 1.6e-13,
            moment_axis: Vec3::z(),
            radius_m: 0.5e-6,
        }
    }
}

/// A single NV center used as the field probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvSensor {
    pub position_m: Vec3,
    /// Unit symmetry axis β.
    pub axis: Vec3,
    /// Zero-field splitting D₀ in Hz.
    pub zero_field_splitting_hz: f64,
    /// ESR linewidth Δν (FWHM) in Hz.
    pub linewidth_fwhm_hz: f64,
    /// Lock-in contrast amplitude C of each dip.
    pub contrast: f64,
    /// Fluorescence count rate R in counts/s.
    pub count_rate_cps: f64,
}

impl NvSensor {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_unit(&self.axis, &format!("{prefix}.axis"))?;
        check_positive(self.zero_field_splitting_hz, &format!("{prefix}.zero_field_splitting_hz"))?;
        check_positive(self.linewidth_fwhm_hz, &format!("{prefix}.linewidth_fwhm_hz"))?;
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return Err(Error::config(format!("{prefix}.contrast"), "must lie in (0, 1)"));
        }
        check_positive(self.count_rate_cps, &format!("{prefix}.count_rate_cps"))
    }
}

impl Default for NvSensor {
    fn default() -> Self {
        Self {
            position_m: Vec3::zeros(),
            axis: Vec3::z(),
            zero_field_splitting_hz: 2.870e9,
            linewidth_fwhm_hz: 7.2e6,
            contrast: 0.053,
            count_rate_cps: 45_000.0,
        }
    }
}

/// Stack of `turns` identical coaxial loops below the device, on the z axis
/// through the NV center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoilMagnet {
    pub loop_radius_m: f64,
    pub turns: u32,
    /// Distance of the coil plane below the bottom glass surface.
    pub standoff_m: f64,
    pub current_a: f64,
}

impl Default for CoilMagnet {
    fn default() -> Self {
        Self { loop_radius_m: 5e-3, turns: 150, standoff_m: 2e-3, current_a: 0.05 }
    }
}

impl CoilMagnet {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.loop_radius_m, &format!("{prefix}.loop_radius_m"))?;
        if self.turns < 1 {
            return Err(Error::config(format!("{prefix}.turns"), "must be at least 1"));
        }
        check_positive(self.standoff_m, &format!("{prefix}.standoff_m"))?;
        if !self.current_a.is_finite() {
            return Err(Error::config(format!("{prefix}.current_a"), "must be finite"));
        }
        Ok(())
    }

    pub fn with_current(&self, current_a: f64) -> Self {
        Self { current_a, ..self.clone() }
    }

    /// On-axis field (T, +z) at `height_m` above the glass.
    pub fn axial_field(&self, height_m: f64) -> f64 {
        coil_axial_field(self, height_m)
    }

    /// d/dz of [`Self::axial_field`] in T/m.
    pub fn axial_gradient(&self, height_m: f64) -> f64 {
        coil_axial_gradient(self, height_m)
    }
}

/// Field at `offset` from a point dipole of moment `moment`.
pub fn dipole_field(moment: &Vec3, offset: &Vec3) -> Result<Vec3> {
    let r2 = offset.norm_squared();
    if r2 == 0.0 || !r2.is_finite() {
        return Err(Error::domain("field evaluated at dipole location"));
    }
    let r = r2.sqrt();
    let r_hat = offset / r;
    let b = (3.0 * r_hat * moment.dot(&r_hat) - moment) * (MU0_OVER_4PI / (r2 * r));
    Ok(b)
}

/// Signed component of `field` along the NV axis β.
pub fn nv_projected_field(field: &Vec3, axis: &Vec3) -> f64 {
    axis.dot(field)
}

/// Zeeman-split transition frequencies `(f−, f+)` in Hz.
pub fn zeeman_frequencies(b_parallel: f64, zero_field_splitting: f64) -> Result<(f64, f64)> {
    if !(b_parallel.abs() < LINEAR_ZEEMAN_LIMIT_T) {
        return Err(Error::domain(format!(
            "|B| = {:.3e} T is outside linear Zeeman regime of this model",
            b_parallel.abs()
        )));
    }
    let shift = gyromagnetic_ratio() * b_parallel.abs();
    Ok((zero_field_splitting - shift, zero_field_splitting + shift))
}

/// Projected field magnitude (T) that produces the splitting `f+ − f−` (Hz).
pub fn splitting_to_field(splitting_hz: f64) -> f64 {
    splitting_hz / (2.0 * gyromagnetic_ratio())
}

/// Splitting `f+ − f−` (Hz) produced by a projected field (T).
pub fn field_to_splitting(b_parallel: f64) -> f64 {
    2.0 * gyromagnetic_ratio() * b_parallel.abs()
}

/// On-axis field of the coil, `µ₀NIa² / (2(a² + d²)^{3/2})` with
/// `d = standoff + height`.
pub fn coil_axial_field(coil: &CoilMagnet, height_m: f64) -> f64 {
    let a2 = coil.loop_radius_m * coil.loop_radius_m;
    let d = coil.standoff_m + height_m;
    let s = a2 + d * d;
    MU0 * f64::from(coil.turns) * coil.current_a * a2 / (2.0 * s * s.sqrt())
}

/// Analytic height derivative of [`coil_axial_field`]; negative for a
/// positive current since the field falls off away from the coil.
pub fn coil_axial_gradient(coil: &CoilMagnet, height_m: f64) -> f64 {
    let d = coil.standoff_m + height_m;
    let a2 = coil.loop_radius_m * coil.loop_radius_m;
    -3.0 * d * coil_axial_field(coil, height_m) / (a2 + d * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn dipole_on_axis_and_equatorial() {
        let m = Vec3::new(0.0, 0.0, 1e-14);
        let b = dipole_field(&m, &Vec3::new(0.0, 0.0, 1e-6)).unwrap();
        assert!(b.x.abs() < 1e-18 && b.y.abs() < 1e-18);
        assert!(rel(b.z, 2e-3) < 1e-12);
        let b = dipole_field(&m, &Vec3::new(1e-6, 0.0, 0.0)).unwrap();
        assert!(rel(b.z, -1e-3) < 1e-12);
        assert!(b.x.abs() < 1e-18);
    }

    #[test]
    fn dipole_at_origin_is_domain_error() {
        let err = dipole_field(&Vec3::z(), &Vec3::zeros()).unwrap_err();
        assert!(err.to_string().contains("field evaluated at dipole location"));
    }

    #[test]
    fn projection_examples() {
        let b = Vec3::new(0.0, 0.0, 5e-4);
        assert_eq!(nv_projected_field(&b, &Vec3::z()), 5e-4);
        assert_eq!(nv_projected_field(&b, &Vec3::x()), 0.0);
        let b = Vec3::new(3e-4, 0.0, 4e-4);
        assert!(rel(nv_projected_field(&b, &Vec3::new(0.6, 0.0, 0.8)), 5e-4) < 1e-12);
    }

    #[test]
    fn zeeman_examples() {
        assert_eq!(zeeman_frequencies(0.0, 2.870e9).unwrap(), (2.870e9, 2.870e9));
        // Δf/(2γ) with γ = 2µB/h.
        assert!((splitting_to_field(42.3e6) * 1e6 - 755.5).abs() < 0.1);
        assert!((splitting_to_field(34.2e6) * 1e6 - 610.9).abs() < 0.1);
        let (lo, hi) = zeeman_frequencies(-7.555e-4, 2.87e9).unwrap();
        assert!(lo < hi);
        assert!(rel(hi - lo, field_to_splitting(7.555e-4)) < 1e-12);
        assert!(zeeman_frequencies(0.011, 2.87e9).is_err());
        assert!(zeeman_frequencies(-0.010, 2.87e9).is_err());
    }

    #[test]
    fn coil_examples() {
        let coil = CoilMagnet::default();
        assert!(rel(coil.axial_field(0.0), 7.54e-4) < 1e-3);
        assert!(rel(coil.axial_gradient(0.0), -0.156) < 1e-3);
        let off = coil.with_current(0.0);
        assert_eq!(off.axial_field(0.0), 0.0);
        assert_eq!(off.axial_gradient(0.0), 0.0);
        let double = coil.with_current(0.1);
        assert!(rel(double.axial_field(3e-6), 2.0 * coil.axial_field(3e-6)) < 1e-14);
        assert!(rel(double.axial_gradient(3e-6), 2.0 * coil.axial_gradient(3e-6)) < 1e-14);
    }

    #[test]
    fn coil_gradient_matches_central_difference() {
        let coil = CoilMagnet::default();
        for &z in &[0.0, 0.7e-6, 5e-6, 1e-3] {
            for &h in &[1e-6, 1e-7] {
                let fd = (coil.axial_field(z + h) - coil.axial_field(z - h)) / (2.0 * h);
                assert!(rel(fd, coil.axial_gradient(z)) < 1e-6, "z={z} h={h}");
            }
        }
    }

    fn unit_vec() -> impl Strategy<Value = Vec3> {
        (0.0..std::f64::consts::PI, 0.0..(2.0 * std::f64::consts::PI)).prop_map(|(t, p)| {
            Vec3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
        })
    }

    proptest! {
        #[test]
        fn dipole_scales_inverse_cube(dir in unit_vec(), axis in unit_vec(),
                                      r in 1e-7..1e-4f64, m in 1e-16..1e-12f64) {
            let moment = axis * m;
            let b1 = dipole_field(&moment, &(dir * r)).unwrap();
            let b2 = dipole_field(&moment, &(dir * (2.0 * r))).unwrap();
            prop_assert!(rel(b2.norm(), b1.norm() / 8.0) < 1e-12);
            let b3 = dipole_field(&(moment * 3.0), &(dir * r)).unwrap();
            prop_assert!((b3 - b1 * 3.0).norm() <= 1e-12 * b1.norm() * 3.0);
        }

        #[test]
        fn dipole_is_divergence_free(dir in unit_vec(), axis in unit_vec(), r in 1e-6..1e-4f64) {
            let moment = axis * 1e-14;
            let p = dir * r;
            let h = r * 1e-3;
            let mut div = 0.0;
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = h;
                let plus = dipole_field(&moment, &(p + e)).unwrap();
                let minus = dipole_field(&moment, &(p - e)).unwrap();
                div += (plus[i] - minus[i]) / (2.0 * h);
            }
            let b = dipole_field(&moment, &p).unwrap().norm();
            prop_assert!(div.abs() < 1e-6 * b / h, "div={div} scale={}", b / h);
        }

        #[test]
        fn splitting_round_trip(b in -9e-3..9e-3f64) {
            let back = splitting_to_field(field_to_splitting(b));
            prop_assert!((back - b.abs()).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }
}
