//! Levenberg–Marquardt for small weighted nonlinear least-squares problems.
//!
//! Residuals are expected pre-weighted (`(y − model)/σ`), so the objective is
//! χ² and `(JᵀJ)⁻¹` at the optimum is the parameter covariance.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A residual vector function of a parameter vector.
pub trait Residuals {
    fn len(&self) -> usize;

    fn residuals(&self, params: &[f64], out: &mut [f64]);

    /// Jacobian `∂r_i/∂p_j`; the default uses central differences.
    fn jacobian(&self, params: &[f64], jac: &mut DMatrix<f64>) {
        central_difference_jacobian(self, params, jac);
    }
}

pub fn central_difference_jacobian<R: Residuals + ?Sized>(problem: &R, params: &[f64], jac: &mut DMatrix<f64>) {
    let n = problem.len();
    let mut p = params.to_vec();
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for j in 0..params.len() {
        let h = 1e-6 * params[j].abs().max(1e-6);
        p[j] = params[j] + h;
        problem.residuals(&p, &mut plus);
        p[j] = params[j] - h;
        problem.residuals(&p, &mut minus);
        p[j] = params[j];
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Relative χ² decrease tolerance.
    pub ftol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 500, xtol: 1e-13, ftol: 1e-15, initial_lambda: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LmSolution {
    pub params: Vec<f64>,
    /// χ² = Σ r².
    pub chi2: f64,
    /// `(JᵀJ)⁻¹` at the solution; `None` if singular.
    pub covariance: Option<DMatrix<f64>>,
    pub iterations: usize,
    /// Reciprocal condition estimate of JᵀJ (smallest/largest eigenvalue).
    pub rcond: f64,
}

impl LmSolution {
    pub fn sigma(&self, j: usize) -> f64 {
        self.covariance.as_ref().map_or(f64::INFINITY, |c| c[(j, j)].max(0.0).sqrt())
    }
}

fn chi2(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub fn levenberg_marquardt<R: Residuals + ?Sized>(problem: &R, start: &[f64], opts: &LmOptions) -> Result<LmSolution> {
    let n = problem.len();
    let k = start.len();
    let mut p = start.to_vec();
    let mut r = vec![0.0; n];
    problem.residuals(&p, &mut r);
    let mut cost = chi2(&r);
    if !cost.is_finite() {
        return Err(Error::FitNotConverged { iterations: 0, diagnostics: "non-finite objective at start".into() });
    }
    let mut jac = DMatrix::zeros(n, k);
    let mut lambda = opts.initial_lambda;
    let mut trial = vec![0.0; k];
    let mut r_trial = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        problem.jacobian(&p, &mut jac);
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        if g.amax() == 0.0 || cost == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for j in 0..k {
                damped[(j, j)] += lambda * a[(j, j)].max(1e-300);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            for j in 0..k {
                trial[j] = p[j] + step[j];
            }
            problem.residuals(&trial, &mut r_trial);
            let new_cost = chi2(&r_trial);
            if new_cost.is_finite() && new_cost <= cost {
                let small_step = (0..k).all(|j| step[j].abs() <= opts.xtol * (p[j].abs() + opts.xtol));
                let small_gain = cost - new_cost <= opts.ftol * cost;
                std::mem::swap(&mut p, &mut trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if small_step || small_gain {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // No downhill step at any damping: we are at the minimum to
            // working precision.
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::FitNotConverged {
            iterations,
            diagnostics: format!("chi2 = {cost:.6e}, lambda = {lambda:.3e}, params = {p:?}"),
        });
    }

    problem.jacobian(&p, &mut jac);
    let a = jac.transpose() * &jac;
    let eig = a.clone().symmetric_eigenvalues();
    let (emin, emax) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    let rcond = if emax > 0.0 { emin / emax } else { 0.0 };
    let covariance = if rcond > 1e-15 { a.try_inverse() } else { None };
    Ok(LmSolution { params: p, chi2: cost, covariance, iterations, rcond })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ExpDecay {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl Residuals for ExpDecay {
        fn len(&self) -> usize {
            self.t.len()
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for (i, (&t, &y)) in self.t.iter().zip(&self.y).enumerate() {
                out[i] = y - p[0] * (-t / p[1]).exp();
            }
        }
    }

    #[test]
    fn recovers_exponential() {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let y = t.iter().map(|t| 3.0 * (-t / 2.5).exp()).collect();
        let prob = ExpDecay { t, y };
        let sol = levenberg_marquardt(&prob, &[1.0, 1.0], &LmOptions::default()).unwrap();
        assert!((sol.params[0] - 3.0).abs() < 1e-10);
        assert!((sol.params[1] - 2.5).abs() < 1e-10);
        assert!(sol.chi2 < 1e-20);
    }

    struct Linear;
    impl Residuals for Linear {
        fn len(&self) -> usize {
            3
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            // y = a + b x at x = 0, 1, 2 with unit sigma.
            let y = [1.0, 2.0, 4.0];
            for (i, o) in out.iter_mut().enumerate() {
                *o = y[i] - (p[0] + p[1] * i as f64);
            }
        }
    }

    #[test]
    fn covariance_matches_linear_regression() {
        let sol = levenberg_marquardt(&Linear, &[0.0, 0.0], &LmOptions::default()).unwrap();
        let cov = sol.covariance.unwrap();
        // (XᵀX)⁻¹ for X = [[1,0],[1,1],[1,2]].
        assert!((cov[(0, 0)] - 5.0 / 6.0).abs() < 1e-8);
        assert!((cov[(1, 1)] - 0.5).abs() < 1e-8);
        assert!((cov[(0, 1)] + 0.5).abs() < 1e-8);
    }
}
