//! Fixed physical constants (CODATA 2018).

/// µ₀/4π in T·m/A.
pub const MU0_OVER_4PI: f64 = 1e-7;
/// Vacuum permeability µ₀ in T·m/A.
pub const MU0: f64 = 4.0 * std::f64::consts::PI * MU0_OVER_4PI;
/// Planck constant in J·s.
pub const PLANCK_H: f64 = 6.626_070_15e-34;
/// Bohr magneton in J/T.
pub const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;
/// Landé g-factor of the NV ground state.
pub const LANDE_G: f64 = 2.0;
/// Boltzmann constant in J/K.
pub const BOLTZMANN_K: f64 = 1.380_649e-23;

/// Electron gyromagnetic ratio g·µB/h in Hz/T (≈ 27.99 GHz/T).
pub const fn gyromagnetic_ratio() -> f64 {
    LANDE_G * BOHR_MAGNETON / PLANCK_H
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_is_28_ghz_per_tesla() {
        let gamma = gyromagnetic_ratio();
        assert!((gamma / 1e9 - 27.9925).abs() < 1e-3, "{gamma}");
    }
}
