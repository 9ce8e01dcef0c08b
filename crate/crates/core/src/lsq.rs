//! Damped Gauss-Newton (Levenberg-Marquardt) least squares with analytic
//! Jacobians.
//!
//! Models are expected to work in normalised coordinates so that parameters
//! are of order one; the step criterion is relative per parameter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A nonlinear least-squares problem `min Σ r_i(p)²`.
pub trait Problem {
    /// Number of residuals.
    fn n_residuals(&self) -> usize;
    fn n_params(&self) -> usize;
    fn residuals(&self, p: &[f64], r: &mut [f64]);
    /// `jac[(i, k)] = ∂r_i/∂p_k`.
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>);
    /// Rejects trial points outside the model's domain (e.g. negative widths).
    fn admissible(&self, _p: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_iter: usize,
    /// Converged when every `|δp_k| <= step_tol · (|p_k| + step_tol)`.
    pub step_tol: f64,
    pub initial_damping: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 200,
            step_tol: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub params: Vec<f64>,
    /// `s² (JᵀJ)⁻¹` with `s² = SSR / (m - n)`; infinite entries when the
    /// normal matrix is singular.
    pub covariance: DMatrix<f64>,
    /// Sum of squared residuals.
    pub ssr: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Normal matrix was numerically singular at the solution.
    pub singular: bool,
}

impl Solution {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.params.len())
            .map(|k| self.covariance[(k, k)].max(0.0).sqrt())
            .collect()
    }

    /// Root-mean-square residual.
    pub fn rms(&self, n_residuals: usize) -> f64 {
        (self.ssr / n_residuals.max(1) as f64).sqrt()
    }

    /// Correlation coefficient between two parameters.
    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        let d = (self.covariance[(a, a)] * self.covariance[(b, b)]).sqrt();
        if d > 0.0 && d.is_finite() {
            self.covariance[(a, b)] / d
        } else {
            f64::NAN
        }
    }
}

fn ssr(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimises `problem` from `p0`.
pub fn solve<P: Problem + ?Sized>(problem: &P, p0: &[f64], opts: Options) -> Result<Solution> {
    let m = problem.n_residuals();
    let n = problem.n_params();
    if p0.len() != n {
        return Err(Error::FitFailure(format!(
            "initial guess has {} parameters, model expects {n}",
            p0.len()
        )));
    }
    if m < n {
        return Err(Error::Degenerate(format!(
            "{m} data points cannot determine {n} parameters"
        )));
    }
    if !problem.admissible(p0) {
        return Err(Error::FitFailure("initial guess outside the model domain".into()));
    }

    let mut p = p0.to_vec();
    let mut r = vec![0.0; m];
    let mut trial_r = vec![0.0; m];
    let mut jac = DMatrix::zeros(m, n);
    problem.residuals(&p, &mut r);
    let mut cost = ssr(&r);
    if !cost.is_finite() {
        return Err(Error::FitFailure("non-finite residuals at the initial guess".into()));
    }

    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        problem.jacobian(&p, &mut jac);
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        if grad.amax() == 0.0 {
            converged = true;
            break;
        }
        let diag: Vec<f64> = (0..n).map(|k| normal[(k, k)].max(1e-12)).collect();

        loop {
            let mut damped = normal.clone();
            for (k, d) in diag.iter().enumerate() {
                damped[(k, k)] += lambda * d;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e20 {
                        break 'outer;
                    }
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let small = p
                .iter()
                .zip(step.iter())
                .all(|(pk, dk)| dk.abs() <= opts.step_tol * (pk.abs() + opts.step_tol));
            if problem.admissible(&trial) {
                problem.residuals(&trial, &mut trial_r);
                let trial_cost = ssr(&trial_r);
                if trial_cost.is_finite() && trial_cost <= cost {
                    p = trial;
                    std::mem::swap(&mut r, &mut trial_r);
                    let improvement = cost - trial_cost;
                    cost = trial_cost;
                    lambda = (lambda / 10.0).max(1e-15);
                    if small || improvement == 0.0 {
                        converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
            if small {
                // No downhill step exists at the resolution of the step criterion.
                converged = true;
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                converged = true;
                break 'outer;
            }
        }
    }

    problem.jacobian(&p, &mut jac);
    let normal = jac.transpose() * &jac;
    let dof = (m - n).max(1) as f64;
    let s2 = cost / dof;
    let (covariance, singular) = match invert_spd(&normal) {
        Some(inv) => (inv * s2, false),
        None => (DMatrix::from_element(n, n, f64::INFINITY), true),
    };
    Ok(Solution {
        params: p,
        covariance,
        ssr: cost,
        iterations,
        converged,
        singular,
    })
}

fn invert_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|k| a[(k, k)]).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return None;
    }
    // Symmetric Jacobi scaling before checking conditioning.
    let d: Vec<f64> = (0..n).map(|k| 1.0 / a[(k, k)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let mut scaled = a.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= d[i] * d[j];
        }
    }
    let eig = scaled.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > 1e-13 * hi) {
        return None;
    }
    let inv = scaled.cholesky()?.inverse();
    let mut out = inv;
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] *= d[i] * d[j];
        }
    }
    Some(out)
}

/// Ordinary (optionally weighted) least squares for a linear model
/// `y ≈ X β`. Returns `(β, covariance, ssr)`.
pub fn linear(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let (m, n) = x.shape();
    if y.len() != m {
        return Err(Error::invalid("y", "length differs from design matrix"));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == m => w.to_vec(),
        Some(_) => return Err(Error::invalid("weights", "length differs from data")),
        None => vec![1.0; m],
    };
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("weights", "must be finite and non-negative"));
    }
    let mut xw = x.clone();
    let mut yw = DVector::from_column_slice(y);
    for i in 0..m {
        let s = w[i].sqrt();
        for k in 0..n {
            xw[(i, k)] *= s;
        }
        yw[i] *= s;
    }
    let normal = xw.transpose() * &xw;
    let inv = invert_spd(&normal)
        .ok_or_else(|| Error::Degenerate("design matrix is rank deficient".into()))?;
    let beta = &inv * (xw.transpose() * &yw);
    let resid = &yw - &xw * &beta;
    let ssr = resid.norm_squared();
    let dof = m.saturating_sub(n).max(1) as f64;
    Ok((beta.iter().copied().collect(), inv * (ssr / dof), ssr))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exp {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl Problem for Exp {
        fn n_residuals(&self) -> usize {
            self.t.len()
        }
        fn n_params(&self) -> usize {
            2
        }
        fn residuals(&self, p: &[f64], r: &mut [f64]) {
            for (i, (&t, &y)) in self.t.iter().zip(&self.y).enumerate() {
                r[i] = p[0] * (-p[1] * t).exp() - y;
            }
        }
        fn jacobian(&self, p: &[f64], j: &mut DMatrix<f64>) {
            for (i, &t) in self.t.iter().enumerate() {
                let e = (-p[1] * t).exp();
                j[(i, 0)] = e;
                j[(i, 1)] = -p[0] * t * e;
            }
        }
    }

    #[test]
    fn recovers_exponential() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let sol = solve(&Exp { t, y }, &[1.0, 0.5], Options::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.params[0] - 2.5).abs() < 1e-9);
        assert!((sol.params[1] - 1.3).abs() < 1e-9);
    }

    #[test]
    fn linear_fit_and_rank_deficiency() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let (b, _, ssr) = linear(&x, &[1.0, 3.0, 5.0], None).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
        assert!(ssr < 1e-20);
        let flat = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(linear(&flat, &[1.0, 1.0, 1.0], None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn too_few_points() {
        let p = Exp { t: vec![0.0], y: vec![1.0] };
        assert!(matches!(solve(&p, &[1.0, 1.0], Options::default()), Err(Error::Degenerate(_))));
    }
}
