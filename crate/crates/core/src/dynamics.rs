//! Overdamped Langevin motion of the bead.
//!
//! Inertia is negligible at this scale, so the particle velocity is the local
//! flow plus force/drag, with a Brownian term of diffusion constant
//! `D = k_B T / (6πηR)`. Vertically the bead sits where an upward,
//! surface-directed fluid force `F₀·exp(−z/λ)` balances the downward pull of
//! the coil gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constants::BOLTZMANN_K;
use crate::magnetostatics::{check_non_negative, check_positive, CoilMagnet, MagneticParticle};
use crate::{Error, Result, Vec3};

/// Vertical resolution of [`equilibrium_height`].
pub const EQUILIBRIUM_TOLERANCE_M: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluidEnvironment {
    pub viscosity_pa_s: f64,
    pub temperature_k: f64,
    pub channel_height_m: f64,
    /// Amplitude F₀ of the upward surface-directed force at the glass (N).
    pub surface_force_n: f64,
    /// Decay length λ of the surface-directed force (m).
    pub surface_force_decay_m: f64,
}

impl Default for FluidEnvironment {
    fn default() -> Self {
        Self {
            viscosity_pa_s: 0.05,
            temperature_k: 298.0,
            channel_height_m: 10e-6,
            // Balances the default coil (50 mA) and moment at 0.7 µm.
            surface_force_n: 3.1538e-14,
            surface_force_decay_m: 3e-6,
        }
    }
}

impl FluidEnvironment {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        check_positive(self.viscosity_pa_s, &format!("{prefix}.viscosity_pa_s"))?;
        check_positive(self.temperature_k, &format!("{prefix}.temperature_k"))?;
        check_positive(self.channel_height_m, &format!("{prefix}.channel_height_m"))?;
        check_non_negative(self.surface_force_n, &format!("{prefix}.surface_force_n"))?;
        check_positive(self.surface_force_decay_m, &format!("{prefix}.surface_force_decay_m"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    /// Center position in m, z up from the bottom glass surface.
    pub position: Vec3,
    pub time: f64,
}

/// Per-particle transport coefficients and wall limits used by the integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinetics {
    /// Stokes drag coefficient (N·s/m).
    pub drag: f64,
    /// Translational diffusion constant (m²/s); zero disables Brownian motion.
    pub diffusion: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Kinetics {
    pub fn new(fluid: &FluidEnvironment, particle: &MagneticParticle, thermal_noise: bool) -> Self {
        let drag = stokes_drag_coefficient(fluid.viscosity_pa_s, particle.radius_m);
        let diffusion = if thermal_noise { diffusion_coefficient(fluid.temperature_k, drag) } else { 0.0 };
        Self {
            drag,
            diffusion,
            z_min: particle.radius_m,
            z_max: fluid.channel_height_m - particle.radius_m,
        }
    }
}

/// Stokes drag `6πηR` on a sphere.
pub fn stokes_drag_coefficient(viscosity: f64, radius: f64) -> f64 {
    6.0 * std::f64::consts::PI * viscosity * radius
}

/// Stokes–Einstein diffusion constant `k_B T / drag`.
pub fn diffusion_coefficient(temperature: f64, drag: f64) -> f64 {
    BOLTZMANN_K * temperature / drag
}

/// Net vertical force (N, positive up) on the bead at center height `z`.
///
/// The moment is taken as aligned with the coil field, so the magnetic term
/// is `m · dB_z/dz`, negative for a positive current.
pub fn vertical_force(z: f64, fluid: &FluidEnvironment, coil: &CoilMagnet, particle: &MagneticParticle) -> f64 {
    fluid.surface_force_n * (-z / fluid.surface_force_decay_m).exp()
        + particle.moment_am2 * coil.axial_gradient(z)
}

/// Stable equilibrium height of the bead center for a given coil current.
///
/// Returns `channel_height` when the net force is upward everywhere (bead
/// pinned under the top surface) and the bottom clearance (`radius`) when it
/// is downward everywhere.
pub fn equilibrium_height(
    current_a: f64,
    fluid: &FluidEnvironment,
    coil: &CoilMagnet,
    particle: &MagneticParticle,
) -> Result<f64> {
    if !(current_a >= 0.0) {
        return Err(Error::domain(format!("coil current must be non-negative (got {current_a})")));
    }
    let coil = coil.with_current(current_a);
    let force = |z: f64| vertical_force(z, fluid, &coil, particle);
    let lo = particle.radius_m;
    let hi = fluid.channel_height_m - particle.radius_m;
    if hi <= lo {
        return Err(Error::domain("channel is thinner than the particle"));
    }

    // The first downward crossing from the glass is the stable root.
    const SCAN: usize = 400;
    let mut a = lo;
    let mut fa = force(a);
    if fa <= 0.0 {
        return Ok(lo);
    }
    for k in 1..=SCAN {
        let b = lo + (hi - lo) * k as f64 / SCAN as f64;
        let fb = force(b);
        if fb <= 0.0 {
            let (mut x0, mut x1) = (a, b);
            while x1 - x0 > EQUILIBRIUM_TOLERANCE_M {
                let mid = 0.5 * (x0 + x1);
                if force(mid) > 0.0 {
                    x0 = mid;
                } else {
                    x1 = mid;
                }
            }
            return Ok(0.5 * (x0 + x1));
        }
        a = b;
        fa = fb;
    }
    debug_assert!(fa > 0.0);
    Ok(fluid.channel_height_m)
}

/// One Euler–Maruyama step of the overdamped Langevin equation.
///
/// `x' = x + (flow + force/drag)·dt + √(2·D·dt)·ξ`, with z clamped to the
/// channel walls.
pub fn step_overdamped<R: Rng + ?Sized>(
    state: &ParticleState,
    flow_velocity: &Vec3,
    force: &Vec3,
    dt: f64,
    kinetics: &Kinetics,
    rng: &mut R,
) -> ParticleState {
    let drift = (flow_velocity + force / kinetics.drag) * dt;
    let mut position = state.position + drift;
    if kinetics.diffusion > 0.0 {
        let scale = (2.0 * kinetics.diffusion * dt).sqrt();
        for c in position.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *c += scale * xi;
        }
    }
    position.z = position.z.clamp(kinetics.z_min, kinetics.z_max);
    ParticleState { position, time: state.time + dt }
}
